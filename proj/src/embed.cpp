#include "rfuse/embed.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "rfuse/metrics.hpp"
#include "rfuse/nn.hpp"

namespace rfuse::embed {

using ad::Tensor;

double iou_temperature(double tau, double iou, double a, double b) {
  const double s = 1.0 / (1.0 + std::exp(-(a * iou + b)));
  return tau + (1.0 - tau) * s;
}

double iou_temperature(double tau, const ScalarGrid3& yi, const ScalarGrid3& yk, double a, double b,
                       double occ_threshold) {
  return iou_temperature(tau, metrics::chunk_iou(yi, yk, occ_threshold), a, b);
}

Tensor ntxent_loss(const Tensor& x, const Tensor& y, const std::vector<double>& tau_prime, double tau) {
  if (x.rank() != 2 || x.shape() != y.shape()) throw ad::ShapeError("ntxent_loss: x and y must be equal [N,D]");
  const int N = x.dim(0);
  if (N < 2) throw std::invalid_argument("ntxent_loss needs at least two pairs");
  if (tau_prime.size() != static_cast<std::size_t>(N) * N)
    throw std::invalid_argument("ntxent_loss: tau_prime must be N*N");
  if (!(tau > 0)) throw std::invalid_argument("ntxent_loss: tau must be > 0");

  // Constant scaling and masking of the similarity matrix.
  std::vector<double> inv(static_cast<std::size_t>(N) * N), mask(inv.size(), 0.0), eye(inv.size(), 0.0);
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < N; ++k) {
      const std::size_t idx = static_cast<std::size_t>(i) * N + k;
      if (i == k) {
        inv[idx] = 0.0;
        mask[idx] = -1e30;
        eye[idx] = 1.0;
      } else {
        if (!(tau_prime[idx] > 0)) throw std::invalid_argument("ntxent_loss: tau' must be > 0");
        inv[idx] = 1.0 / tau_prime[idx];
      }
    }
  const Tensor sim = ad::matmul_nt(x, y);
  const Tensor pos = ad::scale(ad::sum_axis(ad::mul(sim, Tensor::from({N, N}, eye)), 1), 1.0 / tau);
  const Tensor neg = ad::logsumexp(ad::add(ad::mul(sim, Tensor::from({N, N}, inv)), Tensor::from({N, N}, mask)), 1);
  return ad::mean(ad::sub(neg, pos));
}

std::vector<double> pairwise_temperatures(const std::vector<const ScalarGrid3*>& targets, double tau, double a,
                                          double b, double occ_threshold) {
  const std::size_t n = targets.size();
  std::vector<double> out(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = i + 1; k < n; ++k) {
      const double t = iou_temperature(tau, *targets[i], *targets[k], a, b, occ_threshold);
      out[i * n + k] = out[k * n + i] = t;
    }
  return out;
}

Tensor stack_blocks(const std::vector<const ScalarGrid3*>& blocks) {
  if (blocks.empty()) throw std::invalid_argument("stack_blocks: no blocks");
  const Dims3 d = blocks[0]->dims();
  std::vector<double> data;
  data.reserve(blocks.size() * d.count());
  for (const auto* b : blocks) {
    if (b->dims() != d) throw GridError("stack_blocks: mixed block dims");
    for (float v : b->values()) data.push_back(1.0 - v);
  }
  return Tensor::from({static_cast<int>(blocks.size()), 1, d.x, d.y, d.z}, std::move(data));
}

ChunkEncoderPair::ChunkEncoderPair(int chunk_dim, int embed_dim, std::uint64_t seed)
    : chunk_dim_(chunk_dim), embed_dim_(embed_dim) {
  if (chunk_dim < 2 || !std::has_single_bit(static_cast<unsigned>(chunk_dim)))
    throw std::invalid_argument("encoder chunk_dim must be a power of two >= 2");
  if (embed_dim < 1) throw std::invalid_argument("embed_dim must be positive");
  const int levels = std::countr_zero(static_cast<unsigned>(chunk_dim));
  static constexpr int kWidths[] = {16, 32, 64, 64};
  for (int l = 0; l < levels; ++l) channels_.push_back(kWidths[std::min(l, 3)]);
  for (const std::string prefix : {"g_in", "g_tgt"}) {
    Rng rng = make_rng(seed, prefix);
    int in = 1;
    for (int l = 0; l < levels; ++l) {
      nn::add_conv(params_, prefix + ".conv" + std::to_string(l), in, channels_[l], 3, rng);
      in = channels_[l];
    }
    nn::add_dense(params_, prefix + ".fc", in, embed_dim, rng);
    // A zero bias would map the empty chunk (all-zero input) to the zero
    // vector, which has no direction.
    auto& b = params_.get(prefix + ".fc.b").mutable_data();
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : b) v = uniform(rng, -bound, bound);
  }
}

Tensor ChunkEncoderPair::encode(const std::string& prefix, const std::vector<const ScalarGrid3*>& chunks) const {
  for (const auto* c : chunks)
    if (c->dims() != Dims3{chunk_dim_, chunk_dim_, chunk_dim_})
      throw GridError("encoder expects " + std::to_string(chunk_dim_) + "^3 chunks, got " + to_string(c->dims()));
  Tensor h = stack_blocks(chunks);
  for (std::size_t l = 0; l < channels_.size(); ++l)
    h = ad::leaky_relu(nn::conv(params_, prefix + ".conv" + std::to_string(l), h, 2, 1), 0.2);
  h = ad::reshape(h, {static_cast<int>(chunks.size()), channels_.back()});
  return ad::l2_normalize(nn::dense(params_, prefix + ".fc", h), 1);
}

Tensor ChunkEncoderPair::encode_input(const std::vector<const ScalarGrid3*>& chunks) const {
  return encode("g_in", chunks);
}
Tensor ChunkEncoderPair::encode_target(const std::vector<const ScalarGrid3*>& chunks) const {
  return encode("g_tgt", chunks);
}

std::vector<float> ChunkEncoderPair::embed_batched(const std::string& prefix,
                                                   const std::vector<const ScalarGrid3*>& chunks) const {
  ad::NoGradGuard guard;
  std::vector<float> out;
  out.reserve(chunks.size() * static_cast<std::size_t>(embed_dim_));
  constexpr std::size_t kBatch = 256;
  for (std::size_t i = 0; i < chunks.size(); i += kBatch) {
    std::vector<const ScalarGrid3*> part(chunks.begin() + static_cast<std::ptrdiff_t>(i),
                                         chunks.begin() + static_cast<std::ptrdiff_t>(std::min(chunks.size(), i + kBatch)));
    const Tensor e = encode(prefix, part);
    for (double v : e.data()) out.push_back(static_cast<float>(v));
  }
  return out;
}

std::vector<float> ChunkEncoderPair::embed_inputs(const std::vector<const ScalarGrid3*>& chunks) const {
  return embed_batched("g_in", chunks);
}
std::vector<float> ChunkEncoderPair::embed_targets(const std::vector<const ScalarGrid3*>& chunks) const {
  return embed_batched("g_tgt", chunks);
}

std::vector<std::size_t> filter_pairs(const std::vector<ChunkPair>& pairs, const HyperParams& hp) {
  std::vector<std::size_t> keep;
  bool have_empty = false;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double occ = occupancy_fraction(pairs[i].target, static_cast<float>(hp.occ_threshold));
    if (occ >= hp.min_chunk_occupancy) {
      keep.push_back(i);
    } else if (!have_empty) {
      keep.push_back(i);
      have_empty = true;
    }
  }
  return keep;
}

namespace {

Tensor batch_loss(const ChunkEncoderPair& enc, const std::vector<ChunkPair>& pairs,
                  const std::vector<std::size_t>& batch, const HyperParams& hp) {
  std::vector<const ScalarGrid3*> xs, ys;
  for (auto i : batch) {
    xs.push_back(&pairs[i].input);
    ys.push_back(&pairs[i].target);
  }
  const auto tp = pairwise_temperatures(ys, hp.tau_retrieval, hp.iou_a, hp.iou_b, hp.occ_threshold);
  return ntxent_loss(enc.encode_input(xs), enc.encode_target(ys), tp, hp.tau_retrieval);
}

std::vector<std::size_t> sample_batch(const std::vector<std::size_t>& pool, std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx = pool;
  // Partial Fisher-Yates: the first n entries are a uniform sample.
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
  idx.resize(n);
  return idx;
}

}  // namespace

ChunkEncoderPair train_retrieval(const std::vector<ChunkPair>& pairs, const HyperParams& hp, std::uint64_t seed,
                                 const RetrievalTrainOptions& opts) {
  hp.validate();
  if (pairs.empty()) throw std::invalid_argument("train_retrieval: empty dataset");
  const int cd = pairs[0].target.dims().x;
  for (const auto& p : pairs)
    if (p.input.dims() != Dims3{cd, cd, cd} || p.target.dims() != Dims3{cd, cd, cd})
      throw GridError("train_retrieval: inconsistent chunk dims");
  ChunkEncoderPair enc(cd, hp.embed_dim, substream_seed(seed, "encoder_init"));
  const auto pool = filter_pairs(pairs, hp);
  if (pool.size() < 2) throw std::invalid_argument("train_retrieval: fewer than two usable pairs");
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(hp.batch_retrieval), pool.size());
  Rng rng = make_rng(seed, "retrieval_batches");
  const ad::AdamConfig adam{hp.lr};
  if (opts.log_csv) *opts.log_csv << "iteration,loss,lr\n";
  for (int it = 1; it <= opts.iterations; ++it) {
    enc.params().zero_grad();
    Tensor loss = batch_loss(enc, pairs, sample_batch(pool, bs, rng), hp);
    const double lv = loss.item();
    ad::backward(loss);
    enc.params().adam_step(adam);
    if (opts.log_csv) *opts.log_csv << it << ',' << lv << ',' << hp.lr << '\n';
    if (opts.checkpoint_every > 0 && !opts.checkpoint_path.empty() && it % opts.checkpoint_every == 0)
      enc.save_file(opts.checkpoint_path);
  }
  return enc;
}

double evaluate_retrieval_loss(const ChunkEncoderPair& enc, const std::vector<ChunkPair>& pairs,
                               const HyperParams& hp, std::uint64_t seed, int batches) {
  const auto pool = filter_pairs(pairs, hp);
  if (pool.size() < 2) throw std::invalid_argument("evaluate_retrieval_loss: fewer than two usable pairs");
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(hp.batch_retrieval), pool.size());
  Rng rng = make_rng(seed, "retrieval_eval");
  ad::NoGradGuard guard;
  double total = 0.0;
  for (int b = 0; b < batches; ++b) total += batch_loss(enc, pairs, sample_batch(pool, bs, rng), hp).item();
  return total / std::max(1, batches);
}

}  // namespace rfuse::embed
