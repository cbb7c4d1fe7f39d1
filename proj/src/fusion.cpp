#include "rfuse/fusion.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "rfuse/binio.hpp"
#include "rfuse/metrics.hpp"
#include "rfuse/nn.hpp"

namespace rfuse::fusion {

using ad::Tensor;

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::attention: return "attention";
    case Mode::naive: return "naive";
    case Mode::no_retrieval: return "no_retrieval";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  if (s == "attention") return Mode::attention;
  if (s == "naive") return Mode::naive;
  if (s == "no_retrieval") return Mode::no_retrieval;
  throw std::invalid_argument("unknown mode '" + s + "' (attention, naive, no_retrieval)");
}

// ---- attention ------------------------------------------------------------

AttentionResult attend(const Tensor& p_in, const Tensor& p_retr, const Tensor& h_in, const Tensor& h_retr,
                       double C, const Tensor& c, const Tensor& d) {
  if (p_in.rank() != 2 || p_retr.rank() != 3 || h_in.rank() != 2 || h_retr.rank() != 3)
    throw ad::ShapeError("attend: expected p_in [P,F], p_retr [k,P,F], h_in [P,A], h_retr [k,P,A]");
  const int k = p_retr.dim(0), P = p_in.dim(0), F = p_in.dim(1);
  if (k < 1) throw std::invalid_argument("attend: k must be >= 1");
  if (p_retr.dim(1) != P || p_retr.dim(2) != F || h_in.dim(0) != P || h_retr.dim(0) != k || h_retr.dim(1) != P ||
      h_retr.dim(2) != h_in.dim(1))
    throw ad::ShapeError("attend: shapes " + ad::to_string(p_in.shape()) + " " + ad::to_string(p_retr.shape()) + " " +
                         ad::to_string(h_in.shape()) + " " + ad::to_string(h_retr.shape()) + " disagree");
  if (!(C > 0)) throw std::invalid_argument("attend: C must be > 0");
  AttentionResult r;
  r.scores = ad::sum_axis(ad::mul(ad::expand(h_in, 0, k), h_retr), 2);
  r.weights = ad::softmax(r.scores, 0, C);
  r.beta = ad::sigmoid(ad::add_scalar(ad::mul_scalar(ad::max_axis(r.scores, 0), c), d));
  const Tensor mixed = ad::sum_axis(ad::mul(ad::expand(r.weights, 2, F), p_retr), 0);
  const Tensor b = ad::expand(r.beta, 1, F);
  r.blended = ad::add(ad::mul(ad::shift(ad::scale(b, -1.0), 1.0), p_in), ad::mul(b, mixed));
  return r;
}

std::vector<double> attention_scores(const std::vector<double>& h_in, const std::vector<std::vector<double>>& h_retr) {
  if (h_retr.empty()) throw std::invalid_argument("attention_scores: k must be >= 1");
  std::vector<double> s;
  for (const auto& h : h_retr) {
    if (h.size() != h_in.size()) throw ad::ShapeError("attention_scores: projection sizes differ");
    double v = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) v += h_in[i] * h[i];
    s.push_back(v);
  }
  return s;
}

std::vector<double> attention_weights(const std::vector<double>& s, double C) {
  if (s.empty()) throw std::invalid_argument("attention_weights: k must be >= 1");
  const double m = *std::max_element(s.begin(), s.end());
  std::vector<double> w(s.size());
  double z = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) z += w[i] = std::exp(C * (s[i] - m));
  for (auto& v : w) v /= z;
  return w;
}

std::vector<double> blend(const std::vector<double>& p_in, const std::vector<std::vector<double>>& p_retr,
                          const std::vector<double>& s, double C, double c, double d) {
  if (p_retr.size() != s.size()) throw ad::ShapeError("blend: k mismatch between features and scores");
  const auto w = attention_weights(s, C);
  const double beta = 1.0 / (1.0 + std::exp(-(c * *std::max_element(s.begin(), s.end()) + d)));
  std::vector<double> out(p_in.size());
  for (std::size_t j = 0; j < p_in.size(); ++j) {
    double mixed = 0.0;
    for (std::size_t i = 0; i < p_retr.size(); ++i) {
      if (p_retr[i].size() != p_in.size()) throw ad::ShapeError("blend: feature sizes differ");
      mixed += w[i] * p_retr[i][j];
    }
    out[j] = (1.0 - beta) * p_in[j] + beta * mixed;
  }
  return out;
}

// ---- model ----------------------------------------------------------------

namespace {

Tensor lrelu(const Tensor& x) { return ad::leaky_relu(x, 0.2); }

struct Sizes {
  int W, c, p, q, n, Ps, S, P;
  explicit Sizes(const ChunkLayout& l)
      : W(l.scene_dim), c(l.chunk_dim), p(l.patch_dim), q(l.chunk_dim / l.patch_dim), n(l.scene_dim / l.chunk_dim),
        Ps(l.scene_dim / l.patch_dim), S(n * n * n), P(Ps * Ps * Ps) {}
};

// [N,F,a,b,c] <-> [N*a*b*c, F]
Tensor cells_to_rows(const Tensor& x) {
  const int F = x.dim(1);
  return ad::reshape(ad::permute(x, {0, 2, 3, 4, 1}), {static_cast<int>(x.size() / F), F});
}

Tensor rows_to_volume(const Tensor& rows, int side) {
  const int F = rows.dim(1);
  return ad::permute(ad::reshape(rows, {1, side, side, side, F}), {0, 4, 1, 2, 3});
}

}  // namespace

FusionModel::FusionModel(const FusionConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  const auto& L = cfg.layout;
  L.validate();
  if (!std::has_single_bit(static_cast<unsigned>(L.patch_dim)) || L.patch_dim < 2)
    throw std::invalid_argument("fusion: patch size must be a power of two >= 2");
  const Sizes z(L);
  if (z.Ps % 2) throw std::invalid_argument("fusion: patches per window side must be even");
  if (cfg.k < 1 || cfg.feature_dim < 1 || cfg.attn_dim < 1) throw std::invalid_argument("fusion: bad model sizes");
  levels_ = std::countr_zero(static_cast<unsigned>(L.patch_dim));

  // Scene patch (I,J,K) -> row of the per-chunk cell table for one rank.
  std::vector<int> slot_of(static_cast<std::size_t>(z.S));
  for (int s = 0; s < z.S; ++s) {
    const auto cell = chunk_cell(s, z.n);
    slot_of[static_cast<std::size_t>((cell[0] * z.n + cell[1]) * z.n + cell[2])] = s;
  }
  for (int I = 0; I < z.Ps; ++I)
    for (int J = 0; J < z.Ps; ++J)
      for (int K = 0; K < z.Ps; ++K) {
        const int slot = slot_of[static_cast<std::size_t>(((I / z.q) * z.n + J / z.q) * z.n + K / z.q)];
        patch_gather_.push_back(slot * z.q * z.q * z.q + ((I % z.q) * z.q + J % z.q) * z.q + K % z.q);
      }

  const int F = cfg.feature_dim;
  Rng rng = make_rng(seed, "fusion_init");
  // f_in: full-resolution stem, levels_ strided stages down to one cell per
  // patch, a bottleneck below that and one skip connection back up.
  nn::add_conv(params_, "fin.e0", 1, 8, 3, rng);
  int in = 8;
  for (int l = 1; l <= levels_; ++l) {
    const int out = l == levels_ ? F : std::min(F, 8 << l);
    nn::add_conv(params_, "fin.e" + std::to_string(l), in, out, 3, rng);
    in = out;
  }
  nn::add_conv(params_, "fin.b", F, 2 * F, 3, rng);
  nn::add_tconv(params_, "fin.up", 2 * F, F, 4, rng);
  nn::add_conv(params_, "fin.fuse", 2 * F, F, 3, rng);

  if (cfg.mode != Mode::no_retrieval) {
    in = 1;
    for (int l = 0; l < levels_; ++l) {
      const int out = l == levels_ - 1 ? F : std::min(F, 8 << l);
      nn::add_conv(params_, "fr.c" + std::to_string(l), in, out, 3, rng);
      in = out;
    }
  }
  if (cfg.mode == Mode::attention) {
    for (const std::string h : {"h_in", "h_retr"}) {
      nn::add_dense(params_, h + ".0", F, F, rng);
      nn::add_dense(params_, h + ".1", F, cfg.attn_dim, rng);
    }
    params_.constant("blend.c", {1}, 1.0);
    params_.constant("blend.d", {1}, 0.0);
  }
  if (cfg.mode == Mode::naive) nn::add_dense(params_, "naive.mix", (cfg.k + 1) * F, F, rng);

  in = F;
  for (int l = 0; l < levels_; ++l) {
    const int out = std::max(8, F >> (l + 1));
    nn::add_tconv(params_, "dec.t" + std::to_string(l), in, out, 4, rng);
    in = out;
  }
  nn::add_conv(params_, "dec.out", in, 1, 3, rng);
}

Tensor FusionModel::f_in(const Tensor& x) const {
  Tensor h = lrelu(nn::conv(params_, "fin.e0", x, 1, 1));
  for (int l = 1; l <= levels_; ++l) h = lrelu(nn::conv(params_, "fin.e" + std::to_string(l), h, 2, 1));
  const Tensor b = lrelu(nn::conv(params_, "fin.b", h, 2, 1));
  const Tensor u = lrelu(nn::tconv(params_, "fin.up", b, 2, 1));
  return lrelu(nn::conv(params_, "fin.fuse", ad::concat({u, h}, 1), 1, 1));
}

Tensor FusionModel::retrieval_features(const std::vector<const ScalarGrid3*>& chunks) const {
  if (cfg_.mode == Mode::no_retrieval) throw std::logic_error("retrieval_features: model has no retrieval branch");
  const int c = cfg_.layout.chunk_dim;
  for (const auto* ch : chunks)
    if (ch->dims() != Dims3{c, c, c}) throw GridError("retrieved chunk dims " + to_string(ch->dims()));
  Tensor h = embed::stack_blocks(chunks);
  for (int l = 0; l < levels_; ++l) h = lrelu(nn::conv(params_, "fr.c" + std::to_string(l), h, 2, 1));
  return h;
}

Tensor FusionModel::to_patch_order(const Tensor& chunk_cells, int k) const {
  const Sizes z(cfg_.layout);
  const Tensor rows = cells_to_rows(chunk_cells);
  const int per_rank = z.S * z.q * z.q * z.q;
  if (rows.dim(0) != k * per_rank) throw ad::ShapeError("to_patch_order: expected " + std::to_string(k) + " x " +
                                                        std::to_string(z.S) + " chunks");
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(k) * patch_gather_.size());
  for (int r = 0; r < k; ++r)
    for (int g : patch_gather_) idx.push_back(r * per_rank + g);
  return ad::reshape(ad::gather_rows(rows, idx), {k, z.P, rows.dim(1)});
}

Tensor FusionModel::mlp(const std::string& prefix, const Tensor& x) const {
  return ad::l2_normalize(nn::dense(params_, prefix + ".1", lrelu(nn::dense(params_, prefix + ".0", x))), 1);
}
Tensor FusionModel::project_in(const Tensor& cells) const { return mlp("h_in", cells); }
Tensor FusionModel::project_retr(const Tensor& cells) const { return mlp("h_retr", cells); }

Tensor FusionModel::decode(const Tensor& cells) const {
  Tensor h = cells;
  for (int l = 0; l < levels_; ++l) h = lrelu(nn::tconv(params_, "dec.t" + std::to_string(l), h, 2, 1));
  return ad::sigmoid(nn::conv(params_, "dec.out", h, 1, 1));
}

ForwardOutput FusionModel::forward(const Tensor& input, const std::vector<const ScalarGrid3*>& retrieved) const {
  const Sizes z(cfg_.layout);
  if (input.shape() != ad::Shape{1, 1, z.W, z.W, z.W})
    throw ad::ShapeError("fusion input must be [1,1," + std::to_string(z.W) + "^3], got " + ad::to_string(input.shape()));
  ForwardOutput out;
  const Tensor p_in = cells_to_rows(f_in(input));
  Tensor blended = p_in;
  if (cfg_.mode != Mode::no_retrieval) {
    if (retrieved.size() != static_cast<std::size_t>(cfg_.k * z.S))
      throw std::invalid_argument("fusion model expects k = " + std::to_string(cfg_.k) + " approximations (" +
                                  std::to_string(cfg_.k * z.S) + " chunks), got " + std::to_string(retrieved.size()) +
                                  " chunks");
    out.retr_raw = retrieval_features(retrieved);
    out.p_retr = to_patch_order(out.retr_raw, cfg_.k);
    const int F = cfg_.feature_dim;
    if (cfg_.mode == Mode::naive) {
      const Tensor side = ad::reshape(ad::permute(out.p_retr, {1, 0, 2}), {z.P, cfg_.k * F});
      blended = lrelu(nn::dense(params_, "naive.mix", ad::concat({p_in, side}, 1)));
    } else {
      out.h_in = mlp("h_in", p_in);
      const Tensor hr = ad::reshape(mlp("h_retr", ad::reshape(out.p_retr, {cfg_.k * z.P, F})),
                                    {cfg_.k, z.P, cfg_.attn_dim});
      out.attn = attend(p_in, out.p_retr, out.h_in, hr, cfg_.C, params_.get("blend.c"), params_.get("blend.d"));
      blended = out.attn.blended;
    }
  }
  out.pred = decode(rows_to_volume(blended, z.Ps));
  return out;
}

void FusionModel::save(std::ostream& os) const {
  binio::write_magic(os, "RFM1");
  for (int v : {cfg_.layout.scene_dim, cfg_.layout.chunk_dim, cfg_.layout.patch_dim, cfg_.k, cfg_.feature_dim,
                cfg_.attn_dim, static_cast<int>(cfg_.mode)})
    binio::write_pod<std::int32_t>(os, v);
  binio::write_pod<double>(os, cfg_.C);
  params_.save(os);
}

FusionModel FusionModel::load(std::istream& is) {
  binio::expect_magic(is, "RFM1");
  FusionConfig cfg;
  cfg.layout.scene_dim = binio::read_pod<std::int32_t>(is);
  cfg.layout.chunk_dim = binio::read_pod<std::int32_t>(is);
  cfg.layout.patch_dim = binio::read_pod<std::int32_t>(is);
  cfg.k = binio::read_pod<std::int32_t>(is);
  cfg.feature_dim = binio::read_pod<std::int32_t>(is);
  cfg.attn_dim = binio::read_pod<std::int32_t>(is);
  const int mode = binio::read_pod<std::int32_t>(is);
  if (mode < 0 || mode > 2) throw binio::FormatError("fusion checkpoint: bad mode");
  cfg.mode = static_cast<Mode>(mode);
  cfg.C = binio::read_pod<double>(is);
  FusionModel m(cfg, 0);
  m.params_.load(is);
  return m;
}

void FusionModel::save_file(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  save(os);
}

FusionModel FusionModel::load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read fusion model " + path);
  return load(is);
}

Tensor encode_window(const ScalarGrid3& window) { return embed::stack_blocks({&window}); }

namespace {

std::vector<ScalarGrid3> approx_chunks(const FusionModel& model, const std::vector<ScalarGrid3>& approx) {
  const auto& cfg = model.config();
  std::vector<ScalarGrid3> chunks;
  if (cfg.mode == Mode::no_retrieval) return chunks;
  if (approx.size() != static_cast<std::size_t>(cfg.k))
    throw std::invalid_argument("model expects k = " + std::to_string(cfg.k) + " approximations, got " +
                                std::to_string(approx.size()));
  for (const auto& a : approx) {
    auto part = unfold(a, cfg.layout);
    for (auto& c : part) chunks.push_back(std::move(c));
  }
  return chunks;
}

std::vector<const ScalarGrid3*> pointers(const std::vector<ScalarGrid3>& v) {
  std::vector<const ScalarGrid3*> out;
  for (const auto& g : v) out.push_back(&g);
  return out;
}

void check_window(const ScalarGrid3& g, const ChunkLayout& layout, const char* what) {
  const int W = layout.scene_dim;
  if (g.dims() != Dims3{W, W, W})
    throw GridError(std::string(what) + " must be " + std::to_string(W) + "^3, got " + to_string(g.dims()));
}

}  // namespace

RefineResult refine(const FusionModel& model, const ScalarGrid3& input, const std::vector<ScalarGrid3>& approx) {
  const auto& cfg = model.config();
  check_window(input, cfg.layout, "refine input");
  for (const auto& a : approx) check_window(a, cfg.layout, "approximation");
  const auto chunks = approx_chunks(model, approx);
  ad::NoGradGuard guard;
  const auto out = model.forward(encode_window(input), pointers(chunks));
  RefineResult r;
  std::vector<float> vals(out.pred.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<float>(out.pred[i]);
  r.output = ScalarGrid3(input.dims(), input.voxel_size(), input.origin(), std::move(vals));
  if (cfg.mode == Mode::attention) {
    r.trace.k = cfg.k;
    r.trace.scores = out.attn.scores.values();
    r.trace.weights = out.attn.weights.values();
    r.trace.beta = out.attn.beta.values();
  }
  return r;
}

LossTerms refinement_loss(const FusionModel& model, const FusionSample& sample, const HyperParams& hp, Rng& rng) {
  const auto& cfg = model.config();
  check_window(sample.input, cfg.layout, "training input");
  check_window(sample.target, cfg.layout, "training target");
  const auto chunks = approx_chunks(model, sample.approx);
  const auto out = model.forward(encode_window(sample.input), pointers(chunks));
  const Sizes z(cfg.layout);
  const Tensor gt = Tensor::from(out.pred.shape(), std::vector<double>(sample.target.values().begin(),
                                                                       sample.target.values().end()));
  LossTerms t;
  // l1 norms (sums over voxels).
  Tensor recon = ad::abs_sum(ad::sub(out.pred, gt));
  t.recon = recon.item();
  t.total = recon;
  if (cfg.mode == Mode::no_retrieval) return t;

  // f_retr features of the ground-truth chunks, in scene patch order.
  const auto gt_chunks = unfold(sample.target, cfg.layout);
  const int j = static_cast<int>(uniform_index(rng, gt_chunks.size()));
  std::vector<int> rows;
  if (cfg.mode == Mode::attention) {
    const int m = std::min(hp.attn_batch, z.P);
    rows.resize(static_cast<std::size_t>(z.P));
    for (int i = 0; i < z.P; ++i) rows[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < m; ++i)
      std::swap(rows[static_cast<std::size_t>(i)],
                rows[static_cast<std::size_t>(i) + uniform_index(rng, static_cast<std::size_t>(z.P - i))]);
    rows.resize(static_cast<std::size_t>(m));
  }
  const bool use_retr = hp.lambda_retr > 0, use_attn = cfg.mode == Mode::attention && hp.lambda_attn > 0;
  if (!use_retr && !use_attn) return t;
  const Tensor gt_cells = model.retrieval_features(pointers(gt_chunks));

  if (use_retr) {
    // The decoder must keep decoding f_retr features to their distance field.
    const Tensor dec = model.decode(ad::gather_rows(gt_cells, {j}));
    const auto& ch = gt_chunks[static_cast<std::size_t>(j)];
    const Tensor tgt = Tensor::from(dec.shape(), std::vector<double>(ch.values().begin(), ch.values().end()));
    const Tensor l = ad::abs_sum(ad::sub(dec, tgt));
    t.retr = l.item();
    t.total = ad::add(t.total, ad::scale(l, hp.lambda_retr));
  }
  if (use_attn) {
    // Input patches against the matching ground-truth patches.
    const Tensor gp = ad::reshape(model.to_patch_order(gt_cells, 1), {z.P, cfg.feature_dim});
    const Tensor x = ad::gather_rows(out.h_in, rows);
    const Tensor y = model.project_retr(ad::gather_rows(gp, rows));
    std::vector<ScalarGrid3> patches;
    for (int r : rows) {
      const int I = r / (z.Ps * z.Ps), J = (r / z.Ps) % z.Ps, K = r % z.Ps;
      patches.push_back(crop(sample.target, {I * z.p, J * z.p, K * z.p}, {z.p, z.p, z.p}));
    }
    const auto taus =
        embed::pairwise_temperatures(pointers(patches), hp.tau_attention, hp.iou_a, hp.iou_b, hp.occ_threshold);
    const Tensor l = embed::ntxent_loss(x, y, taus, hp.tau_attention);
    t.attn = l.item();
    t.total = ad::add(t.total, ad::scale(l, hp.lambda_attn));
  }
  return t;
}

FusionModel train_refinement(const std::vector<FusionSample>& data, const FusionConfig& cfg, const HyperParams& hp,
                             std::uint64_t seed, const RefineTrainOptions& opts) {
  hp.validate();
  if (data.empty()) throw std::invalid_argument("train_refinement: empty dataset");
  if (cfg.mode != Mode::no_retrieval)
    for (const auto& s : data)
      if (s.approx.size() != static_cast<std::size_t>(cfg.k))
        throw std::invalid_argument("train_refinement: every sample needs k = " + std::to_string(cfg.k) +
                                    " cached approximations");
  FusionModel model(cfg, substream_seed(seed, "fusion_init"));
  Rng rng = make_rng(seed, "refine_batches");
  const ad::AdamConfig adam{opts.lr};
  if (opts.log_csv) *opts.log_csv << "iteration,loss,recon,retr,attn,lr\n";
  const int B = hp.batch_refine;
  for (int it = 1; it <= opts.iterations; ++it) {
    model.params().zero_grad();
    double lv = 0, rc = 0, rt = 0, at = 0;
    for (int b = 0; b < B; ++b) {
      const auto& s = data[uniform_index(rng, data.size())];
      auto terms = refinement_loss(model, s, hp, rng);
      lv += terms.total.item() / B;
      rc += terms.recon / B;
      rt += terms.retr / B;
      at += terms.attn / B;
      ad::backward(B == 1 ? terms.total : ad::scale(terms.total, 1.0 / B));
    }
    model.params().adam_step(adam);
    if (opts.log_csv)
      *opts.log_csv << it << ',' << lv << ',' << rc << ',' << rt << ',' << at << ',' << opts.lr << '\n';
  }
  return model;
}

SceneReconstruction reconstruct_scene(const FusionModel& model, const db::ChunkDatabase& database,
                                      const embed::ChunkEncoderPair& enc, const ScalarGrid3& input) {
  const auto& cfg = model.config();
  const int W = cfg.layout.scene_dim;
  auto wins = windows(input, cfg.layout, W, kEmptyTdf);
  for (auto& w : wins) {
    std::vector<ScalarGrid3> approx;
    if (cfg.mode != Mode::no_retrieval)
      for (auto& a : db::assemble_approximations(database, enc, w.grid, cfg.layout, cfg.k))
        approx.push_back(std::move(a.scene));
    w.grid = refine(model, w.grid, approx).output;
  }
  SceneReconstruction r;
  r.tdf = reassemble(wins, input.dims(), input.voxel_size(), input.origin());
  r.mesh = geom::marching_cubes(r.tdf);
  return r;
}

}  // namespace rfuse::fusion
