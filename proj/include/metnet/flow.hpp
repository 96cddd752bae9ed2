#pragma once

#include "metnet/tensor.hpp"

namespace metnet {

// Per-pixel displacement in pixels per frame interval.
struct FlowField {
    Tensor u;  // [H,W], +x (columns)
    Tensor v;  // [H,W], +y (rows)

    FlowField() = default;
    FlowField(std::int64_t h, std::int64_t w) : u(Shape{h, w}), v(Shape{h, w}) {}
};

}  // namespace metnet
