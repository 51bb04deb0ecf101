#include "vmoba/toytrain.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "vmoba/attention.hpp"
#include "vmoba/rng.hpp"
#include "vmoba/selection.hpp"

namespace vmoba {

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Smallest wrapped displacement from x to 0 on a ring of circumference n.
double torus_delta(double x, double n) {
  double r = std::fmod(x, n);
  if (r < 0) r += n;
  if (r > n / 2) r -= n;
  return r;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 33;
  return x;
}

std::vector<MovingBlob> sample_blobs(Rng& rng, const LatentGeometry& geom) {
  std::size_t count = 2 + rng.uniform_index(2);
  double hw_cap = static_cast<double>(std::min(geom.height, geom.width)) / 4.0;
  std::vector<MovingBlob> blobs(count);
  for (MovingBlob& b : blobs) {
    b.center_h = rng.uniform_double(0.0, static_cast<double>(geom.height));
    b.center_w = rng.uniform_double(0.0, static_cast<double>(geom.width));
    b.vel_h = rng.uniform_double(-1.5, 1.5);
    b.vel_w = rng.uniform_double(-1.5, 1.5);
    b.amplitude = rng.uniform_double(0.5, 1.5);
    b.sigma = rng.uniform_double(1.0, std::max(1.0, hw_cap));
  }
  return blobs;
}

}  // namespace

const char* attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::full: return "full";
    case AttentionMode::vmoba: return "vmoba";
    case AttentionMode::moba1d: return "moba1d";
  }
  throw std::invalid_argument("unknown attention mode value");
}

AttentionMode attention_mode_from_name(const std::string& name) {
  if (name == "full") return AttentionMode::full;
  if (name == "vmoba") return AttentionMode::vmoba;
  if (name == "moba1d") return AttentionMode::moba1d;
  throw std::invalid_argument("unknown attention mode \"" + name +
                              "\" (expected full, vmoba, or moba1d)");
}

Tensor blob_frames(const LatentGeometry& geom,
                   std::span<const MovingBlob> blobs, std::size_t first_frame,
                   std::size_t frame_count) {
  double fh = static_cast<double>(geom.height);
  double fw = static_cast<double>(geom.width);
  std::vector<float> field(frame_count * geom.height * geom.width, 0.0f);
  std::size_t i = 0;
  for (std::size_t t = 0; t < frame_count; ++t) {
    double ft = static_cast<double>(first_frame + t);
    for (std::size_t h = 0; h < geom.height; ++h) {
      for (std::size_t w = 0; w < geom.width; ++w, ++i) {
        double value = 0.0;
        for (const MovingBlob& b : blobs) {
          double dh = torus_delta(static_cast<double>(h) -
                                      (b.center_h + ft * b.vel_h), fh);
          double dw = torus_delta(static_cast<double>(w) -
                                      (b.center_w + ft * b.vel_w), fw);
          value += b.amplitude *
                   std::exp(-(dh * dh + dw * dw) / (2.0 * b.sigma * b.sigma));
        }
        field[i] = static_cast<float>(value);
      }
    }
  }
  Shape shape{field.size()};
  return Tensor(std::move(shape), std::move(field));
}

std::pair<Tensor, Tensor> blob_batch(const LatentGeometry& geom,
                                     std::span<const MovingBlob> blobs) {
  std::size_t s = geom.seq_len();
  Tensor input_frames = blob_frames(geom, blobs, 0, geom.frames);
  Tensor target_frames = blob_frames(geom, blobs, 1, geom.frames);
  std::vector<float> in(input_frames.flat().begin(), input_frames.flat().end());
  std::vector<float> tg(target_frames.flat().begin(),
                        target_frames.flat().end());
  return {Tensor(Shape{1, s}, std::move(in)), Tensor(Shape{1, s}, std::move(tg))};
}

std::pair<Tensor, Tensor> synth_video_batch(std::uint64_t seed,
                                            const LatentGeometry& geom,
                                            std::size_t batch) {
  if (batch == 0) {
    throw std::invalid_argument("synth_video_batch: batch must be positive");
  }
  std::size_t s = geom.seq_len();
  Tensor input(Shape{batch, s});
  Tensor target(Shape{batch, s});
  for (std::size_t sample = 0; sample < batch; ++sample) {
    Rng rng(mix_seed(seed, sample));
    std::vector<MovingBlob> blobs = sample_blobs(rng, geom);
    auto [in, tg] = blob_batch(geom, blobs);
    for (std::size_t i = 0; i < s; ++i) {
      input.at(sample, i) = in[i];
      target.at(sample, i) = tg[i];
    }
  }
  return {std::move(input), std::move(target)};
}

void ToyModelConfig::validate() const {
  geometry.validate();
  if (layers < 3) {
    throw std::invalid_argument(
        "toy model needs layers >= 3 so the 1d/2d/3d cycle completes");
  }
  if (!(tau > 0.0) || tau > 1.0) {
    throw std::invalid_argument("toy model tau must be in (0, 1]");
  }
  if (moba_k < 1) throw std::invalid_argument("toy model k must be >= 1");
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("learning rate must be positive");
  }
  if (batch == 0) throw std::invalid_argument("batch must be positive");
  if (eval_every == 0) throw std::invalid_argument("eval_every must be positive");
}

ToyModelConfig ToyModelConfig::with_defaults() const {
  ToyModelConfig c = *this;
  if (c.part_1d.block.empty()) {
    c.part_1d = PartitionSpec::temporal(ceil_div(c.geometry.frames, 4));
  }
  if (c.part_2d.block.empty()) {
    c.part_2d = PartitionSpec::spatial(ceil_div(c.geometry.height, 4),
                                       ceil_div(c.geometry.width, 4));
  }
  if (c.part_3d.block.empty()) {
    c.part_3d = PartitionSpec::spatio_temporal(
        ceil_div(c.geometry.frames, 2), ceil_div(c.geometry.height, 4),
        ceil_div(c.geometry.width, 4));
  }
  return c;
}

namespace {

// Parameters and gradient buffers of the toy stack: scalar-to-hidden input
// embedding, per-layer Q/K/V/O projections, hidden-to-scalar readout. The
// positional table is fixed, not learned.
struct ToyModel {
  std::size_t layers, hidden, heads, head_dim, seq;
  Tensor w_in;   // [1 x hidden]
  Tensor w_out;  // [hidden x 1]
  std::vector<Tensor> wq, wk, wv, wo;  // each [hidden x hidden]
  Tensor pos;    // [seq x hidden], fixed sinusoidal table

  ToyModel(const ToyModelConfig& cfg) {
    layers = cfg.layers;
    hidden = cfg.geometry.hidden;
    heads = cfg.geometry.heads;
    head_dim = cfg.geometry.head_dim();
    seq = cfg.geometry.seq_len();

    Rng rng(mix_seed(cfg.seed, 0xbeef));
    float a = 1.0f / std::sqrt(static_cast<float>(hidden));
    auto init = [&](Shape shape, float bound) {
      TensorT<float> t(shape);
      for (float& v : t.flat()) v = rng.uniform_float(-bound, bound);
      return t;
    };
    w_in = init(Shape{1, hidden}, 0.5f);
    w_out = init(Shape{hidden, 1}, a);
    for (std::size_t l = 0; l < layers; ++l) {
      wq.push_back(init(Shape{hidden, hidden}, a));
      wk.push_back(init(Shape{hidden, hidden}, a));
      wv.push_back(init(Shape{hidden, hidden}, a));
      wo.push_back(init(Shape{hidden, hidden}, a));
    }

    pos = Tensor(Shape{seq, hidden});
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t e = 0; e < hidden; ++e) {
        double exponent = static_cast<double>(2 * (e / 2)) /
                          static_cast<double>(hidden);
        double angle = static_cast<double>(i) / std::pow(10000.0, exponent);
        pos.at(i, e) = static_cast<float>(e % 2 ? std::cos(angle)
                                                : std::sin(angle));
      }
    }
  }
};

struct ToyGrads {
  Tensor w_in, w_out;
  std::vector<Tensor> wq, wk, wv, wo;

  explicit ToyGrads(const ToyModel& m)
      : w_in(Shape{1, m.hidden}), w_out(Shape{m.hidden, 1}) {
    for (std::size_t l = 0; l < m.layers; ++l) {
      wq.emplace_back(Shape{m.hidden, m.hidden});
      wk.emplace_back(Shape{m.hidden, m.hidden});
      wv.emplace_back(Shape{m.hidden, m.hidden});
      wo.emplace_back(Shape{m.hidden, m.hidden});
    }
  }
};

struct LayerPlan {
  const BlockLayout* layout = nullptr;  // null means full attention
  std::string scheme;
};

// Activations of one sample's forward pass, kept for the backward pass.
struct SampleTape {
  std::vector<Tensor> x;                       // [layers+1] of [s x hidden]
  std::vector<Tensor> qp, kp, vp, attn_out;    // per layer, [s x hidden]
  std::vector<std::vector<AttentionResult>> head_res;  // [layer][head]
  std::vector<std::vector<SelectionMask>> head_mask;   // [layer][head]
  std::vector<float> pred;                     // [s]
};

Tensor slice_head(const Tensor& m, std::size_t head, std::size_t head_dim) {
  std::size_t s = m.rows();
  Tensor out(Shape{s, head_dim});
  for (std::size_t i = 0; i < s; ++i) {
    const float* src = m.data() + i * m.cols() + head * head_dim;
    float* dst = out.data() + i * head_dim;
    for (std::size_t c = 0; c < head_dim; ++c) dst[c] = src[c];
  }
  return out;
}

void add_head_slice(Tensor& dst, const Tensor& part, std::size_t head,
                    std::size_t head_dim) {
  std::size_t s = dst.rows();
  for (std::size_t i = 0; i < s; ++i) {
    float* out = dst.data() + i * dst.cols() + head * head_dim;
    const float* src = part.data() + i * head_dim;
    for (std::size_t c = 0; c < head_dim; ++c) out[c] += src[c];
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

class ToyRun {
 public:
  ToyRun(const ToyModelConfig& cfg)
      : cfg_(cfg), model_(cfg), full_mask_(all_ones_mask(model_.seq, 1)) {
    layout_1d_ = build_layout(cfg.geometry, cfg.part_1d);
    layout_2d_ = build_layout(cfg.geometry, cfg.part_2d);
    layout_3d_ = build_layout(cfg.geometry, cfg.part_3d);
    // A one-block layout drives the full-attention backward through the same
    // sparse kernels.
    full_layout_ =
        build_layout(cfg.geometry, PartitionSpec::temporal(cfg.geometry.frames));

    if (cfg.mode == AttentionMode::moba1d &&
        cfg.moba_k > layout_1d_.block_count) {
      throw std::invalid_argument(
          "moba1d k exceeds the 1d layout's block count");
    }

    for (std::size_t l = 0; l < cfg.layers; ++l) {
      LayerPlan plan;
      if (cfg.mode == AttentionMode::full) {
        plan.scheme = "full";
      } else if (cfg.mode == AttentionMode::moba1d) {
        plan.layout = &layout_1d_;
        plan.scheme = "1d";
      } else {
        switch (scheme_for_layer(l)) {
          case Scheme::temporal_1d: plan.layout = &layout_1d_; break;
          case Scheme::spatial_2d: plan.layout = &layout_2d_; break;
          case Scheme::spatio_temporal_3d: plan.layout = &layout_3d_; break;
        }
        plan.scheme = scheme_name(scheme_for_layer(l));
      }
      plans_.push_back(std::move(plan));
    }
  }

  const std::vector<LayerPlan>& plans() const { return plans_; }

  // Forward for one sample row; fills the tape when one is supplied.
  double forward(std::span<const float> content, std::span<const float> target,
                 SampleTape* tape) {
    std::size_t s = model_.seq, hidden = model_.hidden;
    Tensor x(Shape{s, hidden});
    for (std::size_t i = 0; i < s; ++i) {
      float c = content[i];
      const float* prow = model_.pos.data() + i * hidden;
      float* xrow = x.data() + i * hidden;
      for (std::size_t e = 0; e < hidden; ++e) {
        xrow[e] = c * model_.w_in[e] + prow[e];
      }
    }
    if (tape) tape->x.push_back(x);

    for (std::size_t l = 0; l < model_.layers; ++l) {
      Tensor qp = matmul(x, model_.wq[l]);
      Tensor kp = matmul(x, model_.wk[l]);
      Tensor vp = matmul(x, model_.wv[l]);
      Tensor attn(Shape{s, hidden});
      std::vector<AttentionResult> head_res;
      std::vector<SelectionMask> head_mask;

      for (std::size_t hd = 0; hd < model_.heads; ++hd) {
        Tensor qh = slice_head(qp, hd, model_.head_dim);
        Tensor kh = slice_head(kp, hd, model_.head_dim);
        Tensor vh = slice_head(vp, hd, model_.head_dim);

        const LayerPlan& plan = plans_[l];
        SelectionMask mask;
        AttentionResult res;
        if (!plan.layout) {
          mask = full_mask_;
          res = dense_attention(qh, kh, vh, true);
        } else {
          const BlockLayout& layout = *plan.layout;
          auto means = block_means(kh, layout);
          auto sim = similarity(qh, means, true);
          if (cfg_.mode == AttentionMode::moba1d) {
            mask = select_local_topk(sim, cfg_.moba_k, layout, true);
          } else {
            mask = select_global_threshold(sim, cfg_.tau, layout, true);
          }
          res = sparse_forward_streamed(qh, kh, vh, layout, mask, true);
        }
        add_head_slice(attn, res.output, hd, model_.head_dim);
        if (tape) {
          head_res.push_back(std::move(res));
          head_mask.push_back(std::move(mask));
        }
      }

      Tensor delta = matmul(attn, model_.wo[l]);
      add_into(x, delta);
      if (tape) {
        tape->qp.push_back(std::move(qp));
        tape->kp.push_back(std::move(kp));
        tape->vp.push_back(std::move(vp));
        tape->attn_out.push_back(std::move(attn));
        tape->head_res.push_back(std::move(head_res));
        tape->head_mask.push_back(std::move(head_mask));
        tape->x.push_back(x);
      }
    }

    double loss = 0.0;
    std::vector<float> pred(s);
    for (std::size_t i = 0; i < s; ++i) {
      const float* xrow = x.data() + i * hidden;
      float acc = 0.0f;
      for (std::size_t e = 0; e < hidden; ++e) {
        acc += xrow[e] * model_.w_out[e];
      }
      pred[i] = acc;
      double diff = static_cast<double>(acc) - static_cast<double>(target[i]);
      loss += diff * diff;
    }
    if (tape) tape->pred = std::move(pred);
    return loss / static_cast<double>(s);
  }

  // Backward for one sample, accumulating into grads. `inv_batch` spreads the
  // batch mean.
  void backward(std::span<const float> content, std::span<const float> target,
                const SampleTape& tape, ToyGrads& grads, double inv_batch) {
    std::size_t s = model_.seq, hidden = model_.hidden;
    const Tensor& x_top = tape.x.back();

    Tensor dx(Shape{s, hidden});
    for (std::size_t i = 0; i < s; ++i) {
      float dpred = static_cast<float>(
          2.0 * (static_cast<double>(tape.pred[i]) -
                 static_cast<double>(target[i])) /
          static_cast<double>(s) * inv_batch);
      const float* xrow = x_top.data() + i * hidden;
      float* dxrow = dx.data() + i * hidden;
      for (std::size_t e = 0; e < hidden; ++e) {
        dxrow[e] = dpred * model_.w_out[e];
        grads.w_out[e] += dpred * xrow[e];
      }
    }

    for (std::size_t l = model_.layers; l-- > 0;) {
      const Tensor& x_in = tape.x[l];
      const Tensor& attn = tape.attn_out[l];

      add_into(grads.wo[l], matmul(transpose(attn), dx));
      Tensor dattn = matmul(dx, transpose(model_.wo[l]));

      Tensor dqp(Shape{s, hidden}), dkp(Shape{s, hidden}), dvp(Shape{s, hidden});
      for (std::size_t hd = 0; hd < model_.heads; ++hd) {
        Tensor qh = slice_head(tape.qp[l], hd, model_.head_dim);
        Tensor kh = slice_head(tape.kp[l], hd, model_.head_dim);
        Tensor vh = slice_head(tape.vp[l], hd, model_.head_dim);
        Tensor dah = slice_head(dattn, hd, model_.head_dim);

        const LayerPlan& plan = plans_[l];
        const BlockLayout& layout = plan.layout ? *plan.layout : full_layout_;
        AttentionGrads hg =
            sparse_backward(tape.head_res[l][hd], qh, kh, vh, layout,
                            tape.head_mask[l][hd], dah, true);
        add_head_slice(dqp, hg.dq, hd, model_.head_dim);
        add_head_slice(dkp, hg.dk, hd, model_.head_dim);
        add_head_slice(dvp, hg.dv, hd, model_.head_dim);
      }

      add_into(grads.wq[l], matmul(transpose(x_in), dqp));
      add_into(grads.wk[l], matmul(transpose(x_in), dkp));
      add_into(grads.wv[l], matmul(transpose(x_in), dvp));

      Tensor dx_in = matmul(dqp, transpose(model_.wq[l]));
      add_into(dx_in, matmul(dkp, transpose(model_.wk[l])));
      add_into(dx_in, matmul(dvp, transpose(model_.wv[l])));
      add_into(dx_in, dx);  // residual branch
      dx = std::move(dx_in);
    }

    // Embedding: x0[i] = content[i] * w_in + pos[i].
    for (std::size_t i = 0; i < s; ++i) {
      float c = content[i];
      const float* dxrow = dx.data() + i * hidden;
      for (std::size_t e = 0; e < hidden; ++e) {
        grads.w_in[e] += c * dxrow[e];
      }
    }
  }

  void apply(const ToyGrads& grads, float lr) {
    auto step = [lr](Tensor& w, const Tensor& g) {
      for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= lr * g[i];
    };
    step(model_.w_in, grads.w_in);
    step(model_.w_out, grads.w_out);
    for (std::size_t l = 0; l < model_.layers; ++l) {
      step(model_.wq[l], grads.wq[l]);
      step(model_.wk[l], grads.wk[l]);
      step(model_.wv[l], grads.wv[l]);
      step(model_.wo[l], grads.wo[l]);
    }
  }

  const ToyModel& model() const { return model_; }

 private:
  ToyModelConfig cfg_;
  ToyModel model_;
  SelectionMask full_mask_;
  BlockLayout layout_1d_, layout_2d_, layout_3d_, full_layout_;
  std::vector<LayerPlan> plans_;
};

}  // namespace

LossTrace train(const ToyModelConfig& raw_config) {
  ToyModelConfig cfg = raw_config.with_defaults();
  cfg.validate();
  cfg.part_1d.validate(cfg.geometry);
  cfg.part_2d.validate(cfg.geometry);
  cfg.part_3d.validate(cfg.geometry);

  auto [train_in, train_tg] = synth_video_batch(cfg.seed, cfg.geometry,
                                                cfg.batch);
  auto [val_in, val_tg] =
      synth_video_batch(mix_seed(cfg.seed, 0x5eed), cfg.geometry, cfg.batch);

  ToyRun run(cfg);
  LossTrace trace;
  for (const LayerPlan& plan : run.plans()) {
    trace.layer_schemes.push_back(plan.scheme);
  }

  std::size_t s = cfg.geometry.seq_len();
  auto batch_loss = [&](const Tensor& in, const Tensor& tg) {
    double total = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      std::span<const float> content{in.data() + b * s, s};
      std::span<const float> target{tg.data() + b * s, s};
      total += run.forward(content, target, nullptr);
    }
    return total / static_cast<double>(cfg.batch);
  };

  float lr = static_cast<float>(cfg.learning_rate);
  double inv_batch = 1.0 / static_cast<double>(cfg.batch);
  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    bool last = step == cfg.steps;
    double loss = 0.0;
    try {
      if (last) {
        loss = batch_loss(train_in, train_tg);
      } else {
        ToyGrads grads(run.model());
        for (std::size_t b = 0; b < cfg.batch; ++b) {
          std::span<const float> content{train_in.data() + b * s, s};
          std::span<const float> target{train_tg.data() + b * s, s};
          SampleTape tape;
          loss += run.forward(content, target, &tape) * inv_batch;
          run.backward(content, target, tape, grads, inv_batch);
        }
        run.apply(grads, lr);
      }
    } catch (const std::domain_error&) {
      // A non-finite activation means the run diverged; keep the partial
      // trace.
      trace.diverged = true;
      break;
    }
    auto t1 = std::chrono::steady_clock::now();
    trace.loss.push_back(loss);
    trace.wall_ms.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (!std::isfinite(loss)) {
      trace.diverged = true;
      break;
    }
    if (step % cfg.eval_every == 0 || last) {
      trace.val_loss.emplace_back(step, batch_loss(val_in, val_tg));
    }
  }
  return trace;
}

LossComparison compare_losses(const std::vector<LossTrace>& traces) {
  if (traces.empty()) {
    throw std::invalid_argument("compare_losses: no traces given");
  }
  std::size_t n = traces[0].loss.size();
  for (const LossTrace& t : traces) {
    if (t.loss.size() != n) {
      throw std::invalid_argument(
          "compare_losses: traces have different step counts");
    }
  }
  LossComparison cmp;
  const std::vector<double>& base = traces[0].loss;
  for (const LossTrace& t : traces) {
    std::vector<double> ratio(n);
    double area = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      ratio[i] = t.loss[i] / base[i];
      area += std::abs(t.loss[i] - base[i]);
    }
    cmp.ratios.push_back(std::move(ratio));
    cmp.final_gap.push_back(t.loss.back() - base.back());
    cmp.area.push_back(area);
  }
  return cmp;
}

void write_trace_csv(std::ostream& out, const LossTrace& trace) {
  out << "step,loss,wall_ms\n";
  // Full round-trip precision: the traces feed numeric comparisons, not just
  // plotting.
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < trace.loss.size(); ++i) {
    out << i << ',' << trace.loss[i] << ',' << trace.wall_ms[i] << '\n';
  }
}

nlohmann::json trace_to_json(const LossTrace& trace) {
  nlohmann::json val = nlohmann::json::array();
  for (const auto& [step, loss] : trace.val_loss) {
    val.push_back({{"step", step}, {"loss", loss}});
  }
  bool empty = trace.loss.empty();
  return nlohmann::json{
      {"initial_loss", empty ? nlohmann::json() : nlohmann::json(trace.initial_loss())},
      {"final_loss", empty ? nlohmann::json() : nlohmann::json(trace.final_loss())},
      {"steps", empty ? 0 : trace.loss.size() - 1},
      {"diverged", trace.diverged},
      {"layer_schemes", trace.layer_schemes},
      {"val_loss", val},
  };
}

nlohmann::json comparison_to_json(const LossComparison& cmp) {
  return nlohmann::json{
      {"final_gap", cmp.final_gap},
      {"area", cmp.area},
      {"final_ratio",
       [&] {
         std::vector<double> r;
         for (const auto& row : cmp.ratios) r.push_back(row.back());
         return r;
       }()},
  };
}

}  // namespace vmoba
