#pragma once

#include <cstdint>
#include <vector>

#include "metnet/flow.hpp"
#include "metnet/tensor.hpp"

namespace metnet::datagen {

// Synthetic episode dynamics: Gaussian precipitation cells advected by a
// smooth flow field with stochastic birth and exponential growth/decay.
// Everything is reproducible from (params, seed).
struct DynamicsParams {
    std::int64_t grid_h = 64;
    std::int64_t grid_w = 64;
    double km_per_px = 1.0;
    int frame_spacing_min = 2;
    int frame_count = 96;
    int aux_channels = 4;

    double advection_speed_kmpm = 0.15;  // base flow magnitude, km per minute
    double advection_angle_deg = 0.0;    // base flow direction, 0 = +x
    double angle_jitter_deg = 20.0;      // per-episode direction spread
    double speed_jitter = 0.25;          // relative per-episode speed spread
    double flow_curl = 0.0;              // amplitude of the smooth spatial flow perturbation

    double blob_birth_rate_per_min = 0.02;
    double growth_rate_per_min = 0.004;  // std of per-blob log-amplitude slope
    int initial_blobs = 6;
    double blob_sigma_min_px = 3.0;
    double blob_sigma_max_px = 7.0;
    double blob_amp_min_mmh = 1.5;
    double blob_amp_max_mmh = 8.0;
    double blob_amp_cap_mmh = 12.0;
};

struct Frame {
    std::int64_t timestamp_min = 0;
    Tensor precip;  // [H,W] mm/h
    Tensor aux;     // [H,W,Cg]
};

struct Episode {
    int id = 0;
    std::uint64_t seed = 0;
    std::int64_t t0_min = 0;  // absolute epoch offset of frame 0
    DynamicsParams params;
    std::vector<Frame> frames;
    FlowField flow_truth;  // px per frame interval, sampled on the grid

    std::int64_t start_min() const { return t0_min; }
    std::int64_t end_min() const {
        return t0_min + static_cast<std::int64_t>(frames.size() - 1) * params.frame_spacing_min;
    }
};

Episode generate_episode(const DynamicsParams& params, std::uint64_t seed);

// Static per-dataset geography: lon/lat ramps, a smooth synthetic elevation
// map, and a radar-coverage quality mask built from overlapping discs.
struct GridStatics {
    Tensor lon;           // [H,W] degrees
    Tensor lat;           // [H,W] degrees
    Tensor elevation;     // [H,W] meters
    Tensor quality_mask;  // [H,W] in {0,1}
};

GridStatics make_statics(std::int64_t h, std::int64_t w, std::uint64_t seed);

// Raw (unnormalized) sample: input slices at the configured spacing ending at
// the anchor, plus the target frame at anchor+lead. Frames are matched to the
// nominal times "immediately prior" with at most `max_mismatch_min` slack.
struct RawSample {
    std::vector<const Frame*> inputs;  // oldest first, slice_count entries
    const Frame* target = nullptr;
    std::int64_t anchor_min = 0;  // absolute minutes
    int lead_min = 0;
};

RawSample make_sample(const Episode& episode, std::int64_t anchor_min, int lead_min,
                      int slice_count, int slice_spacing_min, int max_mismatch_min = 5);

struct SplitPattern {
    int train = 16;
    int val = 2;
    int test = 2;
};

struct Split {
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;
};

// Contiguous blocks assigned cyclically (train, val, test, train, ...).
Split temporal_split(int episode_count, const SplitPattern& pattern);

}  // namespace metnet::datagen
