#include "metnet/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "metnet/errors.hpp"

namespace metnet::preprocess {

double quantile(std::vector<double> values, double p) {
    if (values.empty()) throw DataError("quantile: empty sample");
    std::sort(values.begin(), values.end());
    if (p <= 0.0) return values.front();
    if (p >= 1.0) return values.back();
    const double pos = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

ChannelStats compute_channel_stats(const std::vector<double>& values) {
    ChannelStats s;
    s.median = quantile(values, 0.5);
    s.iqr = quantile(values, 0.75) - quantile(values, 0.25);
    return s;
}

Tensor normalize_robust(const Tensor& channel, const ChannelStats& stats) {
    Tensor out(channel.shape());
    if (stats.iqr < 1e-6) return out;  // constant channel, avoid the division
    const float med = static_cast<float>(stats.median);
    const float inv = static_cast<float>(1.0 / stats.iqr);
    for (std::int64_t i = 0; i < channel.numel(); ++i) out.at(i) = (channel.at(i) - med) * inv;
    return out;
}

Tensor normalize_precip(const Tensor& rate) {
    Tensor out(rate.shape());
    for (std::int64_t i = 0; i < rate.numel(); ++i) {
        const float r = rate.at(i);
        if (r < 0.0f) throw DataError("normalize_precip: negative rate " + std::to_string(r));
        out.at(i) = std::log(r + 0.01f) * 0.25f;
    }
    return out;
}

Tensor squash(const Tensor& x) {
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const float v = x.at(i);
        out.at(i) = std::isnan(v) ? 0.0f : std::tanh(v);
    }
    return out;
}

TimeFields time_fields_from_minutes(std::int64_t minutes) {
    static const int kMonthDays[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    if (minutes < 0) throw DataError("time_fields_from_minutes: negative offset");
    TimeFields t;
    t.hour = static_cast<int>((minutes / 60) % 24);
    int day_of_year = static_cast<int>((minutes / (60 * 24)) % 365);
    int month = 0;
    while (day_of_year >= kMonthDays[month]) {
        day_of_year -= kMonthDays[month];
        ++month;
    }
    t.month = month + 1;
    t.day = day_of_year + 1;
    return t;
}

namespace {

void normalize_extent(const Tensor& src, float* dst) {
    float lo = src.at(0), hi = src.at(0);
    for (std::int64_t i = 0; i < src.numel(); ++i) {
        lo = std::min(lo, src.at(i));
        hi = std::max(hi, src.at(i));
    }
    if (hi - lo < 1e-12f) {
        for (std::int64_t i = 0; i < src.numel(); ++i) dst[i] = 0.0f;
        return;
    }
    const float scale = 2.0f / (hi - lo);
    for (std::int64_t i = 0; i < src.numel(); ++i) dst[i] = (src.at(i) - lo) * scale - 1.0f;
}

}  // namespace

Tensor static_features(const Tensor& lon, const Tensor& lat, const Tensor& elevation,
                       const TimeFields& t) {
    if (lon.rank() != 2 || !lon.same_shape(lat) || !lon.same_shape(elevation)) {
        throw ShapeError("static_features: geo maps must share one [H,W] shape");
    }
    const std::int64_t h = lon.dim(0), w = lon.dim(1);
    const std::int64_t hw = h * w;
    std::vector<float> geo(static_cast<std::size_t>(3 * hw));
    normalize_extent(lon, geo.data());
    normalize_extent(lat, geo.data() + hw);
    normalize_extent(elevation, geo.data() + 2 * hw);
    const float tf[3] = {static_cast<float>(t.hour) / 24.0f, static_cast<float>(t.day) / 31.0f,
                         static_cast<float>(t.month) / 12.0f};
    Tensor out(Shape{h, w, 6});
    for (std::int64_t p = 0; p < hw; ++p) {
        float* row = out.data() + p * 6;
        row[0] = geo[static_cast<std::size_t>(p)];
        row[1] = geo[static_cast<std::size_t>(hw + p)];
        row[2] = geo[static_cast<std::size_t>(2 * hw + p)];
        row[3] = tf[0];
        row[4] = tf[1];
        row[5] = tf[2];
    }
    return out;
}

Tensor space_to_depth(const Tensor& x, std::int64_t block) {
    if (x.rank() != 3) throw ShapeError("space_to_depth: input must be [H,W,C]");
    if (block < 1) throw ShapeError("space_to_depth: block must be positive");
    const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (h % block != 0 || w % block != 0) {
        throw ShapeError("space_to_depth: dims " + shape_str(x.shape()) + " not divisible by block " +
                         std::to_string(block));
    }
    Tensor out(Shape{h / block, w / block, c * block * block});
    for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t j = 0; j < w; ++j) {
            const std::int64_t ti = i / block, di = i % block;
            const std::int64_t tj = j / block, dj = j % block;
            const float* src = x.data() + (i * w + j) * c;
            float* dst = out.data() + ((ti * (w / block) + tj) * c * block * block) + (di * block + dj) * c;
            std::copy_n(src, c, dst);
        }
    }
    return out;
}

Tensor depth_to_space(const Tensor& x, std::int64_t block) {
    if (x.rank() != 3) throw ShapeError("depth_to_space: input must be [H,W,C]");
    const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (c % (block * block) != 0) {
        throw ShapeError("depth_to_space: channels not divisible by block^2");
    }
    const std::int64_t c0 = c / (block * block);
    Tensor out(Shape{h * block, w * block, c0});
    for (std::int64_t i = 0; i < h * block; ++i) {
        for (std::int64_t j = 0; j < w * block; ++j) {
            const std::int64_t ti = i / block, di = i % block;
            const std::int64_t tj = j / block, dj = j % block;
            const float* src = x.data() + (ti * w + tj) * c + (di * block + dj) * c0;
            float* dst = out.data() + (i * w * block + j) * c0;
            std::copy_n(src, c0, dst);
        }
    }
    return out;
}

LeadTimeIndex encode_lead_time(int minutes, std::int64_t lead_count) {
    if (minutes % 2 != 0) {
        throw ConfigError("lead time " + std::to_string(minutes) + " min is odd; leads are 2-minute bins");
    }
    if (minutes < 2 || minutes > 2 * lead_count) {
        throw ConfigError("lead time " + std::to_string(minutes) + " min outside [2," +
                          std::to_string(2 * lead_count) + "]");
    }
    LeadTimeIndex lead;
    lead.minutes = minutes;
    lead.index = minutes / 2 - 1;
    lead.one_hot.assign(static_cast<std::size_t>(lead_count), 0.0f);
    lead.one_hot[static_cast<std::size_t>(lead.index)] = 1.0f;
    return lead;
}

int decode_lead_index(int index) { return (index + 1) * 2; }

double bin_lower_edge(int bin, double width_mmh) { return static_cast<double>(bin) * width_mmh; }

int rate_to_bin(double rate_mmh, std::int64_t bins, double width_mmh) {
    if (rate_mmh < 0.0) throw DataError("rate_to_bin: negative rate");
    if (bins < 1 || width_mmh <= 0.0) throw ConfigError("rate_to_bin: invalid bin layout");
    auto b = static_cast<std::int64_t>(std::floor(rate_mmh / width_mmh));
    // Fix up against the computed edges so the edge invariant is exact.
    while (b > 0 && bin_lower_edge(static_cast<int>(b), width_mmh) > rate_mmh) --b;
    while (b + 1 < bins && bin_lower_edge(static_cast<int>(b + 1), width_mmh) <= rate_mmh) ++b;
    if (b >= bins) b = bins - 1;  // rates past the top edge group into the last bin
    return static_cast<int>(b);
}

int threshold_start_bin(double threshold_mmh, std::int64_t bins, double width_mmh) {
    auto b = static_cast<std::int64_t>(std::ceil(threshold_mmh / width_mmh));
    while (b > 0 && bin_lower_edge(static_cast<int>(b - 1), width_mmh) >= threshold_mmh) --b;
    while (b < bins && bin_lower_edge(static_cast<int>(b), width_mmh) < threshold_mmh) ++b;
    if (b < 0) b = 0;
    if (b > bins) b = bins;
    return static_cast<int>(b);
}

double prob_above_threshold(const float* probs, std::int64_t bins, double threshold_mmh,
                            double width_mmh) {
    const int start = threshold_start_bin(threshold_mmh, bins, width_mmh);
    double acc = 0.0;
    for (std::int64_t k = start; k < bins; ++k) acc += static_cast<double>(probs[k]);
    return acc;
}

InputPatch assemble_input(const std::vector<Tensor>& slices, const Tensor& statics,
                          const LeadTimeIndex& lead, const TimeFields& anchor) {
    if (slices.empty()) throw ShapeError("assemble_input: no slices");
    const std::int64_t h = slices[0].dim(0), w = slices[0].dim(1);
    const std::int64_t data_ch = slices[0].dim(2);
    for (const auto& s : slices) {
        if (s.rank() != 3 || s.dim(0) != h || s.dim(1) != w || s.dim(2) != data_ch) {
            throw ShapeError("assemble_input: slice shapes disagree");
        }
    }
    if (statics.rank() != 3 || statics.dim(0) != h || statics.dim(1) != w || statics.dim(2) != 6) {
        throw ShapeError("assemble_input: statics must be [H,W,6]");
    }
    const auto lead_ch = static_cast<std::int64_t>(lead.one_hot.size());
    const std::int64_t c = data_ch + 6 + lead_ch;
    const auto t = static_cast<std::int64_t>(slices.size());

    InputPatch patch;
    patch.anchor = anchor;
    patch.lead_minutes = lead.minutes;
    patch.tensor = Tensor(Shape{t, h, w, c});
    float* dst = patch.tensor.data();
    for (std::int64_t si = 0; si < t; ++si) {
        const float* data = slices[static_cast<std::size_t>(si)].data();
        const float* st = statics.data();
        for (std::int64_t p = 0; p < h * w; ++p) {
            float* row = dst + (si * h * w + p) * c;
            std::copy_n(data + p * data_ch, data_ch, row);
            std::copy_n(st + p * 6, 6, row + data_ch);
            std::copy_n(lead.one_hot.data(), lead_ch, row + data_ch + 6);
        }
    }
    return patch;
}

}  // namespace metnet::preprocess
