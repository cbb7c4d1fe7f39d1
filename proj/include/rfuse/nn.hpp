#pragma once

#include <string>

#include "rfuse/tensor.hpp"

// Layer helpers over a ParamStore. A layer named "enc.c1" owns the
// parameters "enc.c1.w" and "enc.c1.b".
namespace rfuse::nn {

void add_conv(ad::ParamStore& ps, const std::string& name, int in, int out, int k, Rng& rng);
void add_tconv(ad::ParamStore& ps, const std::string& name, int in, int out, int k, Rng& rng);
void add_dense(ad::ParamStore& ps, const std::string& name, int in, int out, Rng& rng);

ad::Tensor conv(const ad::ParamStore& ps, const std::string& name, const ad::Tensor& x, int stride, int pad);
ad::Tensor tconv(const ad::ParamStore& ps, const std::string& name, const ad::Tensor& x, int stride, int pad);
ad::Tensor dense(const ad::ParamStore& ps, const std::string& name, const ad::Tensor& x);

/// Copies every parameter value of `src` whose name starts with `prefix`
/// into `dst` (shapes must match).
void copy_params(const ad::ParamStore& src, ad::ParamStore& dst, const std::string& prefix = "");

}  // namespace rfuse::nn
