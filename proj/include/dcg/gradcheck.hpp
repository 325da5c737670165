#pragma once

#include <map>
#include <string>
#include <vector>

#include "dcg/model.hpp"

namespace dcg {

// Parameter group of a model parameter name.
inline std::string parameter_group(const std::string& name) {
  if (name.rfind("enc.", 0) == 0) return "cnn";
  if (name.rfind("rel_pe.", 0) == 0) return "relative_pe";
  if (name.rfind("head.", 0) == 0) return "latent_mlp";
  if (name.rfind("dec.", 0) == 0) return "decoder";
  return "other";
}

struct GroupCheck {
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
};

struct ModelGradReport {
  std::map<std::string, GroupCheck> groups;
  std::vector<std::string> unreached;  // trainable parameters missing from the gradient map
  double loss = 0.0;

  double max_rel_error() const {
    double m = 0;
    for (auto& [_, g] : groups) m = std::max(m, g.max_rel_error);
    return m;
  }
  bool passed(double tol) const { return unreached.empty() && !groups.empty() && max_rel_error() < tol; }
};

// Fixed-input fixture for the end-to-end check: random images in [-1, 1], a
// short random stroke sequence that fills the decoder length, and a fixed ε.
struct GradFixture {
  Example<double> example;
  Tensor<double> eps;
};

inline GradFixture make_grad_fixture(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 11));
  GradFixture f;
  const std::size_t n = cfg.patches + 1;
  f.example.images = Tensor<double>(Shape{n, 1, cfg.input_size, cfg.input_size});
  for (auto& v : f.example.images.values()) v = 2 * uniform01(rng) - 1;
  StrokeSequence seq;
  const std::size_t points = cfg.max_seq_len - 1;
  for (std::size_t i = 0; i < points; ++i)
    seq.points.push_back({std::round(200 * uniform01(rng) - 100), std::round(200 * uniform01(rng) - 100), i + 1 == points || uniform01(rng) < 0.3 ? Pen::lift : Pen::down});
  f.example.strokes = to_stroke5<double>(seq, cfg.offset_scale);
  f.eps = normal_tensor<double>({cfg.latent_dim}, 1.0, rng);
  return f;
}

template <class T>
Example<T> cast_example(const Example<double>& ex) {
  Example<T> out;
  out.id = ex.id;
  out.label = ex.label;
  out.images = ex.images.cast<T>();
  out.strokes.inputs = ex.strokes.inputs.cast<T>();
  out.strokes.targets = ex.strokes.targets.cast<T>();
  out.strokes.points = ex.strokes.points;
  return out;
}

// Training-mode loss of one sketch under fixed ε.
template <class T>
Var<T> fixture_loss(const Model<T>& model, Binder<T>& p, const Example<T>& ex, const Tensor<T>& eps) {
  std::vector<const Example<T>*> batch{&ex};
  std::vector<Tensor<T>> e{eps};
  return forward_batch(model, p, batch, NormMode::train, &e).loss;
}

// Reverse-mode gradients of the 64-bit model against central differences of
// step h for every trainable coordinate. The difference quotients evaluate the
// loss in extended precision so that rounding noise stays far below the 1e-8
// relative-error floor even where the true gradient vanishes.
inline ModelGradReport check_model_gradients(const Model<double>& model, const GradFixture& fx, double h = 1e-5) {
  ModelGradReport rep;
  Tape<double> tape;
  Binder<double> p(tape, model.params());
  Var<double> loss = fixture_loss(model, p, fx.example, fx.eps);
  rep.loss = loss.value().item();
  const auto grads = p.named(tape.gradient(loss));

  using Wide = long double;
  Model<Wide> wide = model.cast<Wide>();
  const Example<Wide> wex = cast_example<Wide>(fx.example);
  const Tensor<Wide> weps = fx.eps.cast<Wide>();
  auto eval = [&] {
    Tape<Wide> t;
    Binder<Wide> q(t, wide.params(), true);
    return fixture_loss(wide, q, wex, weps).value().item();
  };

  for (auto& [name, prm] : model.params()) {
    if (!prm.trainable) continue;
    auto it = grads.find(name);
    if (it == grads.end()) {
      rep.unreached.push_back(name);
      continue;
    }
    auto& group = rep.groups[parameter_group(name)];
    Tensor<Wide>& value = wide.params().value(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const Wide saved = value[i];
      value[i] = saved + static_cast<Wide>(h);
      const Wide up = eval();
      value[i] = saved - static_cast<Wide>(h);
      const Wide down = eval();
      value[i] = saved;
      const double numeric = static_cast<double>((up - down) / (2 * static_cast<Wide>(h)));
      const double err = relative_error(it->second[i], numeric);
      ++group.coordinates;
      if (!(err <= group.max_rel_error)) {
        group.max_rel_error = err;
        group.worst_parameter = name;
        group.worst_index = i;
      }
    }
  }
  return rep;
}

}  // namespace dcg
