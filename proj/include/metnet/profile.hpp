#pragma once

#include <cstdint>
#include <string>

#include "metnet/errors.hpp"

namespace metnet {

// Every architectural dimension in one place. "reference" carries the
// published scale, "desk" trains in minutes on a CPU, "micro" exists for
// end-to-end finite-difference checks.
struct ModelProfile {
    std::string name = "custom";
    std::int64_t slices = 7;             // t
    std::int64_t input_h = 64;           // grid-resolution patch dims
    std::int64_t input_w = 64;
    std::int64_t s2d_block = 2;          // space-to-depth block for packaging
    std::int64_t down_ch1 = 16;          // first downsampler conv width
    std::int64_t down_ch2 = 32;          // remaining downsampler conv width
    std::int64_t encoder_ch = 48;        // ConvLSTM hidden channels
    std::int64_t agg_ch = 48;            // axial attention width
    std::int64_t heads = 4;
    std::int64_t blocks = 4;             // axial blocks, alternating W/H
    std::int64_t bins = 64;              // K
    std::int64_t leads = 60;             // L; lead minutes are {2,...,2L} step 2
    std::int64_t target_h = 8;
    std::int64_t target_w = 8;
    std::int64_t aux_ch = 4;             // Cg
    std::int64_t input_spacing_min = 6;  // minutes between input slices
    double bin_width_mmh = 0.2;
    bool skip_first_conv_stage = false;  // ReducedSpatial variant

    std::int64_t input_channels() const { return 1 + aux_ch + 6 + leads; }
    std::int64_t data_channels() const { return 1 + aux_ch; }
    std::int64_t packaged_channels() const {
        return data_channels() * s2d_block * s2d_block + 6 + leads;
    }
    std::int64_t packaged_h() const { return input_h / s2d_block; }
    std::int64_t packaged_w() const { return input_w / s2d_block; }
    std::int64_t spatial_reduction() const { return skip_first_conv_stage ? 2 : 4; }
    std::int64_t aggregated_h() const { return packaged_h() / spatial_reduction(); }
    std::int64_t aggregated_w() const { return packaged_w() / spatial_reduction(); }
    std::int64_t max_lead_minutes() const { return 2 * leads; }

    void validate() const;
};

ModelProfile reference_profile();
ModelProfile desk_profile();
ModelProfile micro_profile();

// Accepts a named profile ("reference"|"desk"|"micro") or a path to a profile
// JSON file.
ModelProfile resolve_profile(const std::string& spec);

std::string profile_to_json(const ModelProfile& p);
ModelProfile profile_from_json_text(const std::string& text);
std::uint64_t profile_hash(const ModelProfile& p);

enum class Ablation { None, ReducedSpatial, ReducedTemporal, GoesOnly };

Ablation ablation_from_string(const std::string& s);
std::string ablation_to_string(Ablation a);

// Table-1 style configuration changes: ReducedSpatial halves the input patch
// and drops the first downsampler conv stage, ReducedTemporal keeps the last
// three slices, GOESOnly changes only the input assembly (flagged elsewhere).
ModelProfile apply_ablation(const ModelProfile& base, Ablation ablation);

}  // namespace metnet
