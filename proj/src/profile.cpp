#include "metnet/profile.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "metnet/rng.hpp"

namespace metnet {

using nlohmann::json;

void ModelProfile::validate() const {
    auto positive = [](std::int64_t v, const char* what) {
        if (v <= 0) throw ConfigError(std::string("profile.") + what + " must be positive");
    };
    positive(slices, "slices");
    positive(input_h, "input_h");
    positive(input_w, "input_w");
    positive(s2d_block, "s2d_block");
    positive(down_ch1, "down_ch1");
    positive(down_ch2, "down_ch2");
    positive(encoder_ch, "encoder_ch");
    positive(agg_ch, "agg_ch");
    positive(heads, "heads");
    positive(bins, "bins");
    positive(leads, "leads");
    positive(target_h, "target_h");
    positive(target_w, "target_w");
    positive(aux_ch, "aux_ch");
    positive(input_spacing_min, "input_spacing_min");
    if (bin_width_mmh <= 0) throw ConfigError("profile.bin_width_mmh must be positive");
    if (blocks < 0 || blocks % 2 != 0) {
        throw ConfigError("profile.blocks must be even (width/height blocks alternate)");
    }
    if (agg_ch % heads != 0) throw ConfigError("profile.heads must divide profile.agg_ch");
    if (input_h % s2d_block != 0 || input_w % s2d_block != 0) {
        throw ConfigError("profile input dims must be divisible by s2d_block");
    }
    const std::int64_t red = spatial_reduction();
    if (packaged_h() % red != 0 || packaged_w() % red != 0) {
        throw ConfigError("packaged input dims must be divisible by the downsampler reduction");
    }
    if (aggregated_h() != target_h || aggregated_w() != target_w) {
        throw ConfigError("aggregated grid " + std::to_string(aggregated_h()) + "x" +
                          std::to_string(aggregated_w()) + " must equal target patch " +
                          std::to_string(target_h) + "x" + std::to_string(target_w));
    }
}

ModelProfile reference_profile() {
    ModelProfile p;
    p.name = "reference";
    p.slices = 7;
    p.input_h = p.input_w = 1024;
    p.s2d_block = 4;
    p.down_ch1 = 160;
    p.down_ch2 = 256;
    p.encoder_ch = 384;
    p.agg_ch = 2048;
    p.heads = 16;
    p.blocks = 8;
    p.bins = 512;
    p.leads = 240;
    p.target_h = p.target_w = 64;
    p.aux_ch = 16;
    p.input_spacing_min = 15;
    return p;
}

ModelProfile desk_profile() {
    ModelProfile p;
    p.name = "desk";
    return p;  // defaults are the desk configuration
}

ModelProfile micro_profile() {
    ModelProfile p;
    p.name = "micro";
    p.slices = 2;
    p.input_h = p.input_w = 16;
    p.s2d_block = 2;
    p.down_ch1 = 4;
    p.down_ch2 = 6;
    p.encoder_ch = 6;
    p.agg_ch = 8;
    p.heads = 2;
    p.blocks = 2;
    p.bins = 8;
    p.leads = 4;
    p.target_h = p.target_w = 2;
    p.aux_ch = 2;
    p.input_spacing_min = 6;
    return p;
}

std::string profile_to_json(const ModelProfile& p) {
    json j;
    j["name"] = p.name;
    j["slices"] = p.slices;
    j["input_h"] = p.input_h;
    j["input_w"] = p.input_w;
    j["s2d_block"] = p.s2d_block;
    j["down_ch1"] = p.down_ch1;
    j["down_ch2"] = p.down_ch2;
    j["encoder_ch"] = p.encoder_ch;
    j["agg_ch"] = p.agg_ch;
    j["heads"] = p.heads;
    j["blocks"] = p.blocks;
    j["bins"] = p.bins;
    j["leads"] = p.leads;
    j["target_h"] = p.target_h;
    j["target_w"] = p.target_w;
    j["aux_ch"] = p.aux_ch;
    j["input_spacing_min"] = p.input_spacing_min;
    j["bin_width_mmh"] = p.bin_width_mmh;
    j["skip_first_conv_stage"] = p.skip_first_conv_stage;
    return j.dump(2);
}

namespace {

template <class T>
void read_key(const json& j, const char* key, T& out) {
    if (!j.contains(key)) throw ConfigError(std::string("profile JSON missing key: ") + key);
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("profile JSON key has wrong type: ") + key);
    }
}

}  // namespace

ModelProfile profile_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid profile JSON: ") + e.what());
    }
    ModelProfile p;
    read_key(j, "name", p.name);
    read_key(j, "slices", p.slices);
    read_key(j, "input_h", p.input_h);
    read_key(j, "input_w", p.input_w);
    read_key(j, "s2d_block", p.s2d_block);
    read_key(j, "down_ch1", p.down_ch1);
    read_key(j, "down_ch2", p.down_ch2);
    read_key(j, "encoder_ch", p.encoder_ch);
    read_key(j, "agg_ch", p.agg_ch);
    read_key(j, "heads", p.heads);
    read_key(j, "blocks", p.blocks);
    read_key(j, "bins", p.bins);
    read_key(j, "leads", p.leads);
    read_key(j, "target_h", p.target_h);
    read_key(j, "target_w", p.target_w);
    read_key(j, "aux_ch", p.aux_ch);
    read_key(j, "input_spacing_min", p.input_spacing_min);
    if (j.contains("bin_width_mmh")) read_key(j, "bin_width_mmh", p.bin_width_mmh);
    if (j.contains("skip_first_conv_stage")) read_key(j, "skip_first_conv_stage", p.skip_first_conv_stage);
    p.validate();
    return p;
}

ModelProfile resolve_profile(const std::string& spec) {
    if (spec == "reference") return reference_profile();
    if (spec == "desk") return desk_profile();
    if (spec == "micro") return micro_profile();
    std::ifstream in(spec);
    if (!in) throw ConfigError("profile '" + spec + "' is neither a named profile nor a readable file");
    std::ostringstream buf;
    buf << in.rdbuf();
    return profile_from_json_text(buf.str());
}

std::uint64_t profile_hash(const ModelProfile& p) { return fnv1a(profile_to_json(p)); }

Ablation ablation_from_string(const std::string& s) {
    if (s == "none" || s.empty()) return Ablation::None;
    if (s == "reduced_spatial") return Ablation::ReducedSpatial;
    if (s == "reduced_temporal") return Ablation::ReducedTemporal;
    if (s == "goes_only") return Ablation::GoesOnly;
    throw ConfigError("unknown ablation: " + s +
                      " (expected none|reduced_spatial|reduced_temporal|goes_only)");
}

std::string ablation_to_string(Ablation a) {
    switch (a) {
        case Ablation::None: return "none";
        case Ablation::ReducedSpatial: return "reduced_spatial";
        case Ablation::ReducedTemporal: return "reduced_temporal";
        case Ablation::GoesOnly: return "goes_only";
    }
    return "none";
}

ModelProfile apply_ablation(const ModelProfile& base, Ablation ablation) {
    ModelProfile p = base;
    switch (ablation) {
        case Ablation::None:
        case Ablation::GoesOnly:
            break;
        case Ablation::ReducedSpatial:
            p.input_h /= 2;
            p.input_w /= 2;
            p.skip_first_conv_stage = true;
            break;
        case Ablation::ReducedTemporal:
            p.slices = std::min<std::int64_t>(base.slices, 3);
            break;
    }
    p.validate();
    return p;
}

}  // namespace metnet
