#pragma once

#include <cstdint>
#include <vector>

#include "metnet/profile.hpp"
#include "metnet/tensor.hpp"

namespace metnet::preprocess {

// Per-channel robust statistics, computed once over the training split and
// stored in the dataset manifest.
struct ChannelStats {
    double median = 0.0;
    double iqr = 1.0;
};

// Type-7 (linear interpolation) quantile of the values; the input is copied
// and sorted internally.
double quantile(std::vector<double> values, double p);
ChannelStats compute_channel_stats(const std::vector<double>& values);

// (x - median) / iqr; degenerate iqr below 1e-6 maps everything to zero.
Tensor normalize_robust(const Tensor& channel, const ChannelStats& stats);

// ln(x + 0.01) / 4 elementwise; rates must be non-negative.
Tensor normalize_precip(const Tensor& rate);

// NaN -> 0 first, then tanh.
Tensor squash(const Tensor& x);

struct TimeFields {
    int hour = 0;   // 0..23
    int day = 1;    // 1..31
    int month = 1;  // 1..12
};

// Calendar fields for an absolute minute offset from the dataset epoch
// (non-leap year, real month lengths).
TimeFields time_fields_from_minutes(std::int64_t minutes);

// Three geo maps normalized to [-1,1] over the grid extents plus hour/24,
// day/31, month/12 tiled spatially -> [H,W,6].
Tensor static_features(const Tensor& lon, const Tensor& lat, const Tensor& elevation,
                       const TimeFields& t);

// Lossless block^2 channel rearrangement, row-major tile order.
Tensor space_to_depth(const Tensor& x, std::int64_t block);
Tensor depth_to_space(const Tensor& x, std::int64_t block);

struct LeadTimeIndex {
    int minutes = 2;
    int index = 0;
    std::vector<float> one_hot;  // length L, single 1 at `index`
};

// minutes must be even and in [2, 2L]; index i = minutes/2 - 1.
LeadTimeIndex encode_lead_time(int minutes, std::int64_t lead_count);
int decode_lead_index(int index);

// bin = min(floor(rate/width), K-1), with an exact fix-up against the
// computed bin edges so lower_edge(bin) <= rate < lower_edge(bin+1) holds
// bitwise for every bin below the last.
int rate_to_bin(double rate_mmh, std::int64_t bins = 512, double width_mmh = 0.2);
double bin_lower_edge(int bin, double width_mmh = 0.2);

// First bin whose lower edge is >= threshold. Thresholds that are not bin
// multiples are effectively rounded down to the previous edge.
int threshold_start_bin(double threshold_mmh, std::int64_t bins, double width_mmh = 0.2);
double prob_above_threshold(const float* probs, std::int64_t bins, double threshold_mmh,
                            double width_mmh = 0.2);

// The model input: [t,H,W,c] with channel order
// [precip, aux..., geo(3), time(3), lead one-hot(L)] per slice.
struct InputPatch {
    Tensor tensor;
    TimeFields anchor;
    int lead_minutes = 2;
};

// Slices are the already-normalized [H,W,1+Cg] stacks, oldest first; statics
// is the [H,W,6] map for the anchor time.
InputPatch assemble_input(const std::vector<Tensor>& slices, const Tensor& statics,
                          const LeadTimeIndex& lead, const TimeFields& anchor);

}  // namespace metnet::preprocess
