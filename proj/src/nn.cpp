#include "rfuse/nn.hpp"

#include <algorithm>

namespace rfuse::nn {

using ad::ParamStore;
using ad::Tensor;

void add_conv(ParamStore& ps, const std::string& name, int in, int out, int k, Rng& rng) {
  ps.kaiming_uniform(name + ".w", {out, in, k, k, k}, in * k * k * k, rng);
  ps.zeros(name + ".b", {out});
}

void add_tconv(ParamStore& ps, const std::string& name, int in, int out, int k, Rng& rng) {
  // Each output voxel of a stride-s transposed conv sees about in * (k/s)^3
  // inputs; in * k^3 / 8 is exact for the k=4, s=2 layers used here.
  ps.kaiming_uniform(name + ".w", {in, out, k, k, k}, std::max(1, in * k * k * k / 8), rng);
  ps.zeros(name + ".b", {out});
}

void add_dense(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
  ps.kaiming_uniform(name + ".w", {out, in}, in, rng);
  ps.zeros(name + ".b", {out});
}

Tensor conv(const ParamStore& ps, const std::string& name, const Tensor& x, int stride, int pad) {
  return ad::conv3(x, ps.get(name + ".w"), ps.get(name + ".b"), stride, pad);
}

Tensor tconv(const ParamStore& ps, const std::string& name, const Tensor& x, int stride, int pad) {
  return ad::transposed_conv3(x, ps.get(name + ".w"), ps.get(name + ".b"), stride, pad);
}

Tensor dense(const ParamStore& ps, const std::string& name, const Tensor& x) {
  return ad::dense(x, ps.get(name + ".w"), ps.get(name + ".b"));
}

void copy_params(const ParamStore& src, ParamStore& dst, const std::string& prefix) {
  for (const auto& name : src.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    auto& d = dst.get(name);
    const auto& s = src.get(name);
    if (d.shape() != s.shape()) throw ad::ShapeError("copy_params: shape mismatch for " + name);
    d.mutable_data() = s.data();
  }
}

}  // namespace rfuse::nn
