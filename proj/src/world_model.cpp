#include "geoworld/world_model.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "geoworld/error.hpp"
#include "geoworld/io.hpp"

namespace geoworld {

using ad::Matrix;
using ad::Var;
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// -- config -----------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
  if (frames < 2) fail("frames must be >= 2");
  if (grid_h < 1 || grid_w < 1 || patch < 1) fail("token grid and patch size must be positive");
  if (latent_channels < 1 || geometry_channels < 1) fail("channel counts must be positive");
  if (width < 8 || width % 8) fail("width must be a positive multiple of 8");
  if (heads < 1 || width % heads) fail("heads must divide width");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (video_depth < 1 || geometry_depth < 1) fail("depths must be >= 1");
  if (mid_layer < 1 || mid_layer > video_depth) fail("mid_layer must lie in [1, video_depth]");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail("alpha must be finite and >= 0");
  if (vocab < 1) fail("vocab must be >= 1");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"frames", c.frames},
          {"grid_h", c.grid_h},
          {"grid_w", c.grid_w},
          {"patch", c.patch},
          {"latent_channels", c.latent_channels},
          {"geometry_channels", c.geometry_channels},
          {"width", c.width},
          {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},
          {"video_depth", c.video_depth},
          {"geometry_depth", c.geometry_depth},
          {"mid_layer", c.mid_layer},
          {"alpha", c.alpha},
          {"vocab", c.vocab},
          {"factorized", c.factorized}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.frames = j.value("frames", c.frames);
    c.grid_h = j.value("grid_h", c.grid_h);
    c.grid_w = j.value("grid_w", c.grid_w);
    c.patch = j.value("patch", c.patch);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.geometry_channels = j.value("geometry_channels", c.geometry_channels);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.video_depth = j.value("video_depth", c.video_depth);
    c.geometry_depth = j.value("geometry_depth", c.geometry_depth);
    c.mid_layer = j.value("mid_layer", std::max(1, c.video_depth / 2));
    c.alpha = j.value("alpha", c.alpha);
    c.vocab = j.value("vocab", c.vocab);
    c.factorized = j.value("factorized", c.factorized);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"decay", c.decay},
          {"epsilon", c.epsilon},
          {"clip_norm", c.clip_norm}};
}

OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.decay = j.value("decay", c.decay);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("optimizer: ") + e.what());
  }
  if (c.steps < 0 || c.batch_size < 1) throw ConfigError("optimizer: steps >= 0 and batch_size >= 1 required");
  if (!(c.learning_rate > 0) || !(c.decay > 0 && c.decay < 1) || !(c.epsilon > 0) || !(c.clip_norm > 0))
    throw ConfigError("optimizer: learning_rate, epsilon, clip_norm > 0 and decay in (0, 1) required");
  return c;
}

// -- parameters -------------------------------------------------------------------

const char* branch_name(Branch b) {
  switch (b) {
    case Branch::VideoBackbone: return "video_backbone";
    case Branch::VideoHead: return "video_head";
    case Branch::Geometry: return "geometry";
  }
  return "?";
}

Parameters::Parameters(const Parameters& o) : slices_(o.slices_), index_(o.index_), values_(o.values_) {}

Parameters& Parameters::operator=(const Parameters& o) {
  slices_ = o.slices_;
  index_ = o.index_;
  values_ = o.values_;
  reset_reads();
  return *this;
}

int Parameters::add(const std::string& name, Branch branch, int rows, int cols) {
  if (index_.count(name)) throw InvalidInputError("duplicate parameter slice " + name);
  SliceInfo s{name, branch, rows, cols, values_.size()};
  values_.resize(values_.size() + s.size(), 0.0);
  slices_.push_back(s);
  index_[name] = static_cast<int>(slices_.size()) - 1;
  return index_[name];
}

int Parameters::find(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInputError("unknown parameter slice " + name);
  return it->second;
}

Matrix Parameters::matrix(int id) const {
  const SliceInfo& s = slice(id);
  reads_[static_cast<std::size_t>(s.branch)].fetch_add(1);
  return Eigen::Map<const RowMajor>(values_.data() + s.offset, s.rows, s.cols);
}

void Parameters::set_matrix(int id, const Matrix& m) {
  const SliceInfo& s = slice(id);
  if (m.rows() != s.rows || m.cols() != s.cols) throw InvalidInputError("set_matrix: shape mismatch for " + s.name);
  Eigen::Map<RowMajor>(values_.data() + s.offset, s.rows, s.cols) = m;
}

Parameters Parameters::zeros_like() const {
  Parameters z(*this);
  std::fill(z.values_.begin(), z.values_.end(), 0.0);
  return z;
}

bool Parameters::same_layout(const Parameters& o) const {
  if (slices_.size() != o.slices_.size()) return false;
  for (std::size_t i = 0; i < slices_.size(); ++i) {
    const auto &a = slices_[i], &b = o.slices_[i];
    if (a.name != b.name || a.branch != b.branch || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

bool Parameters::finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::uint64_t Parameters::hash(Branch branch) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& s : slices_) {
    if (s.branch != branch) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(values_.data() + s.offset);
    for (std::size_t i = 0; i < s.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

void Parameters::zero_branch(Branch branch) {
  for (const auto& s : slices_)
    if (s.branch == branch) std::fill_n(values_.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), 0.0);
}

void Parameters::reset_reads() const {
  for (auto& r : reads_) r.store(0);
}

namespace {

std::string block_prefix(const char* branch, int b) { return std::string(branch) + ".block" + std::to_string(b) + "."; }

void add_linear(Parameters& p, const std::string& name, Branch br, int in, int out) {
  p.add(name + ".W", br, in, out);
  p.add(name + ".b", br, 1, out);
}

void add_block(Parameters& p, const std::string& pre, Branch br, int D, int hidden, bool cross) {
  add_linear(p, pre + "ada", br, D, (cross ? 9 : 6) * D);
  add_linear(p, pre + "qkv", br, D, 3 * D);
  add_linear(p, pre + "proj", br, D, D);
  if (cross) {
    add_linear(p, pre + "cross_q", br, D, D);
    add_linear(p, pre + "cross_kv", br, D, 2 * D);
    add_linear(p, pre + "cross_proj", br, D, D);
  }
  add_linear(p, pre + "mlp1", br, D, hidden);
  add_linear(p, pre + "mlp2", br, hidden, D);
}

Parameters layout(const ModelConfig& c) {
  Parameters p;
  const int D = c.width, H = c.width * c.mlp_ratio;
  const Branch E = Branch::VideoBackbone, U = Branch::VideoHead, G = Branch::Geometry;
  add_linear(p, "vid.in", E, c.latent_channels, D);
  add_linear(p, "vid.cond", E, c.latent_channels, D);
  p.add("vid.instr", E, c.vocab, D);
  add_linear(p, "vid.temb1", E, D, D);
  add_linear(p, "vid.temb2", E, D, D);
  for (int b = 0; b < c.video_depth; ++b) add_block(p, block_prefix("vid", b), b < c.mid_layer ? E : U, D, H, false);
  add_linear(p, "vid.final_ada", U, D, 2 * D);
  add_linear(p, "vid.out", U, D, c.latent_channels);

  add_linear(p, "geo.in", G, c.geometry_channels, D);
  add_linear(p, "geo.temb1", G, D, D);
  add_linear(p, "geo.temb2", G, D, D);
  for (int b = 0; b < c.geometry_depth; ++b) add_block(p, block_prefix("geo", b), G, D, H, true);
  add_linear(p, "geo.final_ada", G, D, 2 * D);
  add_linear(p, "geo.out", G, D, c.geometry_channels);
  return p;
}

bool ends_with(const std::string& s, const char* suffix) {
  const std::size_t n = std::strlen(suffix);
  return s.size() >= n && s.compare(s.size() - n, n, suffix) == 0;
}

bool zero_initialized(const std::string& name) {
  return name.find("ada.") != std::string::npos || name.rfind("vid.out.", 0) == 0 || name.rfind("geo.out.", 0) == 0;
}

}  // namespace

Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed, bool zero_heads) {
  cfg.validate();
  Parameters p = layout(cfg);
  Rng rng(seed);
  for (const auto& s : p.slices()) {
    const bool bias = ends_with(s.name, ".b");
    const bool zero = zero_heads && zero_initialized(s.name);
    // Draw for every slice so the stream does not depend on zero_heads.
    const double sd = (bias ? 0.1 : 1.0) / std::sqrt(static_cast<double>(s.rows));
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double v = rng.normal() * sd;
      double& dst = p.values()[s.offset + i];
      if (zero) dst = 0.0;
      else if (bias && zero_heads) dst = 0.0;
      else dst = v;
    }
  }
  return p;
}

// -- forward graphs ---------------------------------------------------------------

namespace {

Matrix sincos(double pos, int dim) {
  Matrix out(1, dim);
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double w = std::pow(10000.0, -static_cast<double>(k) / half);
    out(0, k) = std::sin(pos * w);
    out(0, half + k) = std::cos(pos * w);
  }
  return out;
}

Matrix timestep_embedding(double t, int D) { return sincos(1000.0 * t, D); }

Matrix positional_embedding(const ModelConfig& c) {
  const int D = c.width, tpf = c.tokens_per_frame();
  Matrix pos(c.tokens(), D);
  for (int f = 0; f < c.frames; ++f)
    for (int r = 0; r < c.grid_h; ++r)
      for (int q = 0; q < c.grid_w; ++q) {
        const int row = f * tpf + r * c.grid_w + q;
        pos.block(row, 0, 1, D / 2) = sincos(f, D / 2);
        pos.block(row, D / 2, 1, D / 4) = sincos(r, D / 4);
        pos.block(row, 3 * D / 4, 1, D / 4) = sincos(q, D / 4);
      }
  return pos;
}

struct Groups {
  ad::AttentionGroups full, spatial, temporal;
  explicit Groups(const ModelConfig& c)
      : full(ad::AttentionGroups::full(c.tokens(), c.tokens())),
        spatial(ad::AttentionGroups::spatial(c.frames, c.tokens_per_frame())),
        temporal(ad::AttentionGroups::temporal(c.frames, c.tokens_per_frame())) {}
  const ad::AttentionGroups& self(const ModelConfig& c, int block) const {
    if (!c.factorized) return full;
    return block % 2 == 0 ? spatial : temporal;
  }
};

/// Binds parameter slices onto a tape, at most once each.
class Binder {
 public:
  Binder(ad::Tape& tape, const Parameters& p, bool differentiable) : tape_(tape), p_(p), diff_(differentiable) {}
  Var operator()(const std::string& name) {
    const int id = p_.find(name);
    for (const auto& [sid, v] : bound_)
      if (sid == id) return v;
    Var v = diff_ ? tape_.leaf(p_.matrix(id)) : tape_.constant(p_.matrix(id));
    bound_.emplace_back(id, v);
    return v;
  }
  Var lin(Var x, const std::string& name) { return ad::linear(x, (*this)(name + ".W"), (*this)(name + ".b")); }
  const std::vector<std::pair<int, Var>>& bound() const { return bound_; }
  ad::Tape& tape() { return tape_; }

 private:
  ad::Tape& tape_;
  const Parameters& p_;
  bool diff_;
  std::vector<std::pair<int, Var>> bound_;
};

Var block(Binder& B, const std::string& pre, Var x, Var cact, const ad::AttentionGroups& groups, int heads, int D,
          const Var* context, const ad::AttentionGroups* cross_groups) {
  const bool cross = context != nullptr;
  const Var ada = B.lin(cact, pre + "ada");
  auto chunk = [&](int i) { return ad::slice_cols(ada, i * D, D); };
  int k = 0;
  {
    const Var sh = chunk(k++), sc = chunk(k++), g = chunk(k++);
    const Var h = ad::modulate(ad::layer_norm(x), sh, sc);
    const Var qkv = B.lin(h, pre + "qkv");
    const Var a = ad::attention(ad::slice_cols(qkv, 0, D), ad::slice_cols(qkv, D, D), ad::slice_cols(qkv, 2 * D, D),
                                heads, groups);
    x = ad::add(x, ad::mul_row(B.lin(a, pre + "proj"), g));
  }
  if (cross) {
    const Var sh = chunk(k++), sc = chunk(k++), g = chunk(k++);
    const Var h = ad::modulate(ad::layer_norm(x), sh, sc);
    const Var q = B.lin(h, pre + "cross_q");
    const Var kv = B.lin(*context, pre + "cross_kv");
    const Var a = ad::attention(q, ad::slice_cols(kv, 0, D), ad::slice_cols(kv, D, D), heads, *cross_groups);
    x = ad::add(x, ad::mul_row(B.lin(a, pre + "cross_proj"), g));
  }
  {
    const Var sh = chunk(k++), sc = chunk(k++), g = chunk(k++);
    const Var h = ad::modulate(ad::layer_norm(x), sh, sc);
    const Var m = B.lin(ad::silu(B.lin(h, pre + "mlp1")), pre + "mlp2");
    x = ad::add(x, ad::mul_row(m, g));
  }
  return x;
}

void check_latent(const ModelConfig& c, const LatentTensor& z, int channels, const char* what) {
  if (z.frames != c.frames || z.tokens != c.tokens_per_frame() || z.channels != channels)
    throw InvalidInputError(std::string(what) + ": expected " + std::to_string(c.frames) + "x" +
                            std::to_string(c.tokens_per_frame()) + "x" + std::to_string(channels) + ", got " +
                            std::to_string(z.frames) + "x" + std::to_string(z.tokens) + "x" + std::to_string(z.channels));
}

void check_cond(const ModelConfig& c, const Conditioning& cond) {
  if (cond.instruction < 0 || cond.instruction >= c.vocab)
    throw InvalidInputError("instruction id " + std::to_string(cond.instruction) + " outside vocabulary of " +
                            std::to_string(c.vocab));
  if (cond.first_frame.frames != 1 || cond.first_frame.tokens != c.tokens_per_frame() ||
      cond.first_frame.channels != c.latent_channels)
    throw InvalidInputError("conditioning first-frame latent has the wrong shape");
}

struct VideoGraph {
  Var m;
  Var v;
};

VideoGraph video_graph(const ModelConfig& c, const Groups& G, Binder& B, Var z, double t, const Conditioning& cond) {
  ad::Tape& T = B.tape();
  const int D = c.width;
  Var x = B.lin(z, "vid.in");
  x = ad::add(x, T.constant(positional_embedding(c)));
  x = ad::add(x, ad::tile_rows(B.lin(T.constant(cond.first_frame.data), "vid.cond"), c.frames));
  Var cv = B.lin(ad::silu(B.lin(T.constant(timestep_embedding(t, D)), "vid.temb1")), "vid.temb2");
  cv = ad::add(cv, ad::row(B("vid.instr"), cond.instruction));
  const Var cact = ad::silu(cv);
  VideoGraph out{x, x};
  for (int b = 0; b < c.video_depth; ++b) {
    x = block(B, block_prefix("vid", b), x, cact, G.self(c, b), c.heads, D, nullptr, nullptr);
    if (b == c.mid_layer - 1) out.m = x;
  }
  const Var ada = B.lin(cact, "vid.final_ada");
  const Var h = ad::modulate(ad::layer_norm(x), ad::slice_cols(ada, 0, D), ad::slice_cols(ada, D, D));
  out.v = B.lin(h, "vid.out");
  return out;
}

Var geometry_graph(const ModelConfig& c, const Groups& G, Binder& B, Var g, double t, Var m) {
  ad::Tape& T = B.tape();
  const int D = c.width;
  Var x = ad::add(B.lin(g, "geo.in"), T.constant(positional_embedding(c)));
  const Var cact = ad::silu(B.lin(ad::silu(B.lin(T.constant(timestep_embedding(t, D)), "geo.temb1")), "geo.temb2"));
  const Var context = ad::layer_norm(m);
  for (int b = 0; b < c.geometry_depth; ++b)
    x = block(B, block_prefix("geo", b), x, cact, G.self(c, b), c.heads, D, &context, &G.spatial);
  const Var ada = B.lin(cact, "geo.final_ada");
  const Var h = ad::modulate(ad::layer_norm(x), ad::slice_cols(ada, 0, D), ad::slice_cols(ada, D, D));
  return B.lin(h, "geo.out");
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericalError(std::string(what) + ": non-finite activations");
}

}  // namespace

Conditioning make_conditioning(const LatentTensor& z0, int instruction) {
  if (z0.frames < 1) throw InvalidInputError("conditioning needs at least one frame");
  Conditioning c;
  c.instruction = instruction;
  c.first_frame = LatentTensor(1, z0.tokens, z0.channels, z0.data.topRows(z0.tokens));
  return c;
}

BackboneOutput backbone_forward(const ModelConfig& cfg, const Parameters& params, const LatentTensor& z_t, double t,
                                const Conditioning& cond) {
  cfg.validate();
  check_latent(cfg, z_t, cfg.latent_channels, "backbone input");
  check_cond(cfg, cond);
  ad::Tape tape(false);
  Binder B(tape, params, false);
  const Groups G(cfg);
  const VideoGraph g = video_graph(cfg, G, B, tape.constant(z_t.data), t, cond);
  require_finite(g.v.value(), "backbone_forward");
  return {LatentTensor(cfg.frames, cfg.tokens_per_frame(), cfg.width, g.m.value()),
          LatentTensor(cfg.frames, cfg.tokens_per_frame(), cfg.latent_channels, g.v.value())};
}

LatentTensor geometry_forward(const ModelConfig& cfg, const Parameters& params, const LatentTensor& g_t, double t,
                              const LatentTensor& m) {
  cfg.validate();
  check_latent(cfg, g_t, cfg.geometry_channels, "geometry input");
  check_latent(cfg, m, cfg.width, "backbone features");
  ad::Tape tape(false);
  Binder B(tape, params, false);
  const Groups G(cfg);
  const Var v = geometry_graph(cfg, G, B, tape.constant(g_t.data), t, tape.constant(m.data));
  require_finite(v.value(), "geometry_forward");
  return LatentTensor(cfg.frames, cfg.tokens_per_frame(), cfg.geometry_channels, v.value());
}

// -- losses and gradients ---------------------------------------------------------

Batch sample_batch(const std::vector<TrainingExample>& data, int batch_size, Rng& rng) {
  if (data.empty()) throw InvalidInputError("empty training set");
  Batch batch;
  for (int i = 0; i < batch_size; ++i) {
    BatchItem item;
    item.example = &data[rng.below(data.size())];
    item.t = rng.uniform();
    const auto& z0 = item.example->z0;
    const auto& g0 = item.example->g0;
    item.z1 = LatentTensor(z0.frames, z0.tokens, z0.channels);
    for (Eigen::Index k = 0; k < item.z1.data.size(); ++k) item.z1.data.data()[k] = rng.normal();
    item.g1 = LatentTensor(g0.frames, g0.tokens, g0.channels);
    for (Eigen::Index k = 0; k < item.g1.data.size(); ++k) item.g1.data.data()[k] = rng.normal();
    batch.push_back(std::move(item));
  }
  return batch;
}

namespace {

struct LossGraph {
  Var total, video, geometry;
};

// Builds the batch loss on `tape`. The geometry branch goes on `geo_tape`,
// which may be a separate non-recording tape when it cannot affect gradients.
LossGraph loss_graph(const ModelConfig& cfg, const Groups& G, Binder& B, Binder& GB, const Batch& batch, double alpha,
                     bool stop_gradient) {
  if (batch.empty()) throw InvalidInputError("empty batch");
  ad::Tape& T = B.tape();
  ad::Tape& GT = GB.tape();
  const bool shared = &T == &GT;
  const double w = 1.0 / static_cast<double>(batch.size());
  Var lv{}, lg{};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const BatchItem& it = batch[i];
    const TrainingExample& ex = *it.example;
    check_latent(cfg, ex.z0, cfg.latent_channels, "video latent");
    check_latent(cfg, ex.g0, cfg.geometry_channels, "geometry latent");
    if (ex.instruction < 0 || ex.instruction >= cfg.vocab) throw InvalidInputError("instruction outside vocabulary");
    const FlowSample zs = flow::interpolate(ex.z0, it.z1, it.t);
    const FlowSample gs = flow::interpolate(ex.g0, it.g1, it.t);
    const Conditioning cond = make_conditioning(ex.z0, ex.instruction);
    const VideoGraph vg = video_graph(cfg, G, B, T.constant(zs.z_t.data), it.t, cond);
    Var m = vg.m;
    if (!shared) m = GT.constant(m.value());
    else if (stop_gradient) m = ad::detach(m);
    const Var vgeo = geometry_graph(cfg, G, GB, GT.constant(gs.z_t.data), it.t, m);
    const Var li = ad::scale(ad::mse(vg.v, zs.v_target.data), w);
    const Var gi = ad::scale(ad::mse(vgeo, gs.v_target.data), w);
    lv = i == 0 ? li : ad::add(lv, li);
    lg = i == 0 ? gi : ad::add(lg, gi);
  }
  Var total = lv;
  if (shared) total = ad::add(lv, ad::scale(lg, alpha));
  return {total, lv, lg};
}

LossTerms terms(const LossGraph& g, double alpha, bool shared) {
  LossTerms t;
  t.video = g.video.value()(0, 0);
  t.geometry = g.geometry.value()(0, 0);
  t.total = shared ? g.total.value()(0, 0) : t.video + alpha * t.geometry;
  return t;
}

}  // namespace

LossTerms joint_loss(const ModelConfig& cfg, const Parameters& params, const Batch& batch, double alpha) {
  cfg.validate();
  ad::Tape tape(false);
  Binder B(tape, params, false);
  const Groups G(cfg);
  const LossGraph g = loss_graph(cfg, G, B, B, batch, alpha, false);
  const LossTerms t = terms(g, alpha, true);
  if (!std::isfinite(t.total)) throw NumericalError("joint_loss: non-finite loss");
  return t;
}

GradResult grad(const ModelConfig& cfg, const Parameters& params, const Batch& batch, double alpha,
                bool stop_gradient_at_m) {
  cfg.validate();
  if (!(alpha >= 0.0)) throw InvalidInputError("alpha must be >= 0");
  const Groups G(cfg);
  ad::Tape tape(true);
  Binder B(tape, params, true);
  // With alpha = 0 the geometry branch cannot receive gradient; evaluate it
  // off-tape so its parameters are left structurally untouched.
  ad::Tape side(false);
  Binder SB(side, params, false);
  const bool shared = alpha != 0.0;
  const LossGraph g = loss_graph(cfg, G, B, shared ? B : SB, batch, alpha, stop_gradient_at_m);
  GradResult out{terms(g, alpha, shared), params.zeros_like()};
  if (!std::isfinite(out.loss.total)) throw NumericalError("grad: non-finite loss");
  tape.backward(g.total);
  for (const auto& [id, v] : B.bound()) {
    const Matrix& gm = tape.grad(v);
    if (gm.size() == 0) continue;
    out.grad.set_matrix(id, gm);
  }
  if (!out.grad.finite()) throw NumericalError("grad: non-finite gradient");
  return out;
}

// -- training ---------------------------------------------------------------------

TrainResult train(const std::vector<TrainingExample>& data, const ModelConfig& cfg, const OptimizerConfig& opt,
                  std::uint64_t seed) {
  cfg.validate();
  if (data.empty()) throw InvalidInputError("train: empty dataset");
  TrainResult res;
  res.params = init_parameters(cfg, seed);
  Parameters v = res.params.zeros_like();
  Rng rng(seed ^ 0x7a11d0c5ULL);
  auto& p = res.params.values();
  double decay_pow = 1.0;
  for (int step = 1; step <= opt.steps; ++step) {
    const Batch batch = sample_batch(data, opt.batch_size, rng);
    GradResult gr;
    try {
      gr = grad(cfg, res.params, batch, cfg.alpha);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    const auto& g = gr.grad.values();
    double sq = 0.0;
    for (double x : g) sq += x * x;
    const double norm = std::sqrt(sq);
    const double clip = norm > opt.clip_norm ? opt.clip_norm / norm : 1.0;
    decay_pow *= opt.decay;
    auto& vv = v.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * clip;
      vv[i] = opt.decay * vv[i] + (1.0 - opt.decay) * gi * gi;
      const double vhat = vv[i] / (1.0 - decay_pow);
      p[i] -= opt.learning_rate * gi / (std::sqrt(vhat) + opt.epsilon);
    }
    if (!res.params.finite()) throw NumericalError("training diverged at step " + std::to_string(step));
    res.curve.push_back({step, gr.loss});
  }
  res.steps = opt.steps;
  res.rng_state = rng.state();
  return res;
}

// -- inference --------------------------------------------------------------------

LatentTensor sample_latent(const ModelConfig& cfg, const Parameters& params, const Conditioning& cond, int steps,
                           std::uint64_t seed) {
  cfg.validate();
  check_cond(cfg, cond);
  Rng rng(seed);
  LatentTensor z1(cfg.frames, cfg.tokens_per_frame(), cfg.latent_channels);
  for (Eigen::Index k = 0; k < z1.data.size(); ++k) z1.data.data()[k] = rng.normal();
  return flow::euler_sample(
      [&](const LatentTensor& z, double t) { return backbone_forward(cfg, params, z, t, cond).v_vid; }, z1, steps);
}

std::vector<scene::Frame> generate(const ModelConfig& cfg, const Parameters& params, const PatchCodec& codec,
                                   const scene::Frame& first_frame, int instruction, int steps, std::uint64_t seed) {
  if (codec.latent_channels != cfg.latent_channels || codec.patches_per_frame() != cfg.tokens_per_frame())
    throw InvalidInputError("codec and model disagree on the latent layout");
  const Conditioning cond = make_conditioning(codec.encode(first_frame), instruction);
  std::vector<scene::Frame> frames = codec.decode(sample_latent(cfg, params, cond, steps, seed));
  // Frame 0 is the observation itself; only frames 1..N-1 are predicted.
  frames[0].rgb = first_frame.rgb;
  frames[0].depth = first_frame.depth;
  return frames;
}

// -- persistence ------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : ck.params.slices())
    slices.push_back({{"name", s.name}, {"branch", branch_name(s.branch)}, {"rows", s.rows}, {"cols", s.cols}});
  const nlohmann::json header = {{"format", "geoworld.checkpoint/1"},
                                 {"config", to_json(ck.config)},
                                 {"step", ck.step},
                                 {"rng_state", ck.rng_state},
                                 {"slices", slices},
                                 {"extra", ck.extra}};
  io::write_headed(path, "GWC1", header, io::DType::F64, ck.params.values());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const io::Headed h = io::read_headed(path, "GWC1", io::DType::F64);
  Checkpoint ck;
  try {
    if (h.header.at("format") != "geoworld.checkpoint/1") throw FormatError("unknown checkpoint format");
    ck.config = model_config_from_json(h.header.at("config"));
    ck.step = h.header.at("step").get<int>();
    ck.rng_state = h.header.at("rng_state").get<std::string>();
    ck.extra = h.header.value("extra", nlohmann::json::object());
    ck.params = init_parameters(ck.config, 0);
    const auto& slices = h.header.at("slices");
    if (slices.size() != ck.params.slices().size()) throw FormatError("checkpoint slice count does not match config");
    for (std::size_t i = 0; i < slices.size(); ++i) {
      const auto& s = ck.params.slices()[i];
      if (slices[i].at("name") != s.name || slices[i].at("rows") != s.rows || slices[i].at("cols") != s.cols)
        throw FormatError("checkpoint slice " + s.name + " does not match config");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  if (h.payload.size() != ck.params.size()) throw FormatError("checkpoint payload size does not match slices");
  ck.params.values() = h.payload;
  return ck;
}

std::string loss_csv(const std::vector<LossRecord>& curve) {
  std::ostringstream os;
  os << "step,L,L_vid,L_geo\n";
  for (const auto& r : curve)
    os << r.step << ',' << io::format_double(r.loss.total) << ',' << io::format_double(r.loss.video) << ','
       << io::format_double(r.loss.geometry) << '\n';
  return os.str();
}

}  // namespace geoworld
