#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcg/model.hpp"

namespace dcg {

// ---------------------------------------------------------------------------
// Datasets

// Normalized sketches with category labels. Ids are positions in `sketches`.
struct Dataset {
  std::vector<std::string> categories;
  std::vector<StrokeSequence> sketches;
  std::vector<std::size_t> labels;
  std::size_t malformed = 0;
  std::size_t empty = 0;
  std::size_t too_long = 0;

  std::size_t size() const { return sketches.size(); }

  std::size_t category_index(const std::string& name) {
    for (std::size_t i = 0; i < categories.size(); ++i)
      if (categories[i] == name) return i;
    categories.push_back(name);
    return categories.size() - 1;
  }

  // Keeps the sketch only if its stroke-5 form (points + end token) fits.
  bool add(const StrokeSequence& raw, const std::string& category, std::size_t max_seq_len) {
    if (raw.empty()) {
      ++empty;
      return false;
    }
    if (raw.size() + 1 > max_seq_len) {
      ++too_long;
      return false;
    }
    sketches.push_back(normalize(raw));
    labels.push_back(category_index(category));
    return true;
  }
};

// Reads every *.ndjson (QuickDraw) and *.dcs (sketch cache) file of `dir`.
// Files are visited in name order; the category is the file stem.
inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t max_seq_len) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".ndjson" || ext == ".dcs")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Dataset ds;
  for (auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + f.string());
    const std::string category = f.stem().string();
    if (f.extension() == ".ndjson") {
      auto parsed = parse_quickdraw_ndjson(in);
      ds.malformed += parsed.malformed;
      ds.empty += parsed.empty;
      for (auto& s : parsed.sequences) ds.add(s, category, max_seq_len);
    } else {
      for (auto& s : read_sketch_cache(in)) ds.add(s, category, max_seq_len);
    }
  }
  if (ds.size() == 0) throw std::runtime_error("dataset in " + dir.string() + " has no usable sketches");
  return ds;
}

// `count` sketches cycling through `shapes`; sketch i has category i % shapes.
inline std::map<std::string, std::vector<StrokeSequence>> synthetic_sketches(std::size_t count, const std::vector<SyntheticShape>& shapes,
                                                                             std::uint64_t seed) {
  if (shapes.empty()) throw std::invalid_argument("synthetic_sketches: no shapes");
  std::map<std::string, std::vector<StrokeSequence>> out;
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = shapes[i % shapes.size()];
    out[shape_name(s)].push_back(generate_synthetic(s, rng));
  }
  return out;
}

inline Dataset synthetic_dataset(std::size_t count, const std::vector<SyntheticShape>& shapes, std::uint64_t seed, std::size_t max_seq_len) {
  Dataset ds;
  for (auto& [name, seqs] : synthetic_sketches(count, shapes, seed))
    for (auto& s : seqs) ds.add(s, name, max_seq_len);
  return ds;
}

template <class T>
std::vector<Example<T>> make_examples(const Dataset& ds, const ModelConfig& cfg) {
  std::vector<Example<T>> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) out.push_back(make_example<T>(ds.sketches[i], cfg, i, ds.labels[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch = 256;
  double lr0 = 1e-3;
  double decay = 0.95;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0: no cap
  double clip_norm = 0.0;
  std::size_t max_consecutive_nonfinite = 10;
};

inline double learning_rate(double lr0, double decay, std::size_t epoch) { return lr0 * std::pow(decay, static_cast<double>(epoch)); }

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  double nll = 0;
};

struct TrainReport {
  std::vector<LossRecord> curve;
  std::size_t steps = 0;
  std::size_t skipped = 0;
};

inline void write_loss_curve(std::ostream& os, const std::vector<LossRecord>& curve) {
  os << "step,epoch,lr,nll\n" << std::setprecision(17);
  for (auto& r : curve) os << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.nll << '\n';
}

template <class T>
bool all_finite(const std::map<std::string, Tensor<T>>& grads) {
  for (auto& [_, g] : grads)
    for (T v : g.values())
      if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// Adam on mean per-sketch NLL. Each epoch visits a seeded permutation of the
// examples; lr is lr0 * decay^epoch. Batch-norm running statistics follow the
// batches seen.
template <class T>
TrainReport train(Model<T>& model, const std::vector<Example<T>>& data, const TrainConfig& cfg,
                  const std::function<void(const LossRecord&)>& on_step = {}) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.batch == 0) throw std::invalid_argument("train: batch must be positive");
  TrainReport report;
  Adam<T> adam(AdamConfig{.clip_norm = cfg.clip_norm});
  Rng order_rng(mix_seed(cfg.seed, 1));
  Rng eps_rng(mix_seed(cfg.seed, 2));
  const std::size_t nz = model.config().latent_dim;
  std::vector<std::size_t> order(data.size());
  std::size_t consecutive = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg.lr0, cfg.decay, epoch);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      if (cfg.max_steps && report.steps >= cfg.max_steps) return report;
      std::vector<const Example<T>*> batch;
      std::vector<Tensor<T>> eps;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch); ++i) {
        batch.push_back(&data[order[i]]);
        eps.push_back(normal_tensor<T>({nz}, 1.0, eps_rng));
      }
      Tape<T> tape;
      Binder<T> p(tape, model.params());
      auto pass = forward_batch(model, p, batch, NormMode::train, &eps);
      const double loss = static_cast<double>(pass.loss.value().item());
      auto grads = p.named(tape.gradient(pass.loss));
      ++report.steps;
      if (!std::isfinite(loss) || !all_finite(grads)) {
        ++report.skipped;
        if (++consecutive > cfg.max_consecutive_nonfinite)
          throw std::runtime_error("train: " + std::to_string(consecutive) + " consecutive non-finite steps, aborting at step " + std::to_string(report.steps));
        continue;
      }
      consecutive = 0;
      adam.step(model.params(), grads, lr);
      model.update_running_stats(pass.bn_stats);
      LossRecord rec{report.steps, epoch, lr, loss};
      report.curve.push_back(rec);
      if (on_step) on_step(rec);
    }
  }
  return report;
}

// Mean reconstruction NLL in evaluation mode (running batch-norm statistics, y = μ).
template <class T>
double dataset_nll(const Model<T>& model, const std::vector<Example<T>>& data) {
  if (data.empty()) throw std::invalid_argument("dataset_nll: empty dataset");
  double total = 0;
  for (auto& ex : data) {
    Tape<T> tape;
    Binder<T> p(tape, model.params(), true);
    std::vector<const Example<T>*> one{&ex};
    total += forward_batch(model, p, one, NormMode::eval, nullptr).nll[0];
  }
  return total / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Category classifier used for Rec: three conv stages (2x2 conv, ReLU, 2x2 max
// pool) and a linear layer over the whole sketch downsampled to 32x32.

struct ClassifierConfig {
  std::vector<std::string> categories;
  std::size_t input_size = 32;
  std::vector<std::size_t> channels{8, 16, 32};

  std::string describe() const {
    std::ostringstream os;
    os << "kind = classifier\ncategories = ";
    for (std::size_t i = 0; i < categories.size(); ++i) os << (i ? "," : "") << categories[i];
    os << "\ninput_size = " << input_size << "\nchannels = ";
    for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
    os << "\n";
    return os.str();
  }

  static ClassifierConfig from_text(const std::string& text) {
    const auto kv = KeyValues::parse(text);
    auto* kind = kv.find("kind");
    if (!kind || *kind != "classifier") throw std::runtime_error("not a classifier checkpoint");
    ClassifierConfig c;
    auto split = [](const std::string& s) {
      std::vector<std::string> out;
      std::istringstream is(s);
      std::string tok;
      while (std::getline(is, tok, ',')) out.push_back(tok);
      return out;
    };
    if (auto* v = kv.find("categories")) c.categories = split(*v);
    if (auto* v = kv.find("input_size")) c.input_size = std::stoul(*v);
    if (auto* v = kv.find("channels")) {
      c.channels.clear();
      for (auto& t : split(*v)) c.channels.push_back(std::stoul(t));
    }
    return c;
  }
};

template <class T>
class Classifier {
 public:
  Classifier(ClassifierConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.categories.empty()) throw std::invalid_argument("Classifier: no categories");
    Rng rng(seed);
    std::size_t in = 1, s = cfg_.input_size;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
      const std::string n = "cls.conv" + std::to_string(i);
      params_.add(n + ".w", normal_tensor<T>({cfg_.channels[i], in, 2, 2}, std::sqrt(2.0 / (4.0 * in)), rng));
      params_.add(n + ".b", Tensor<T>(Shape{cfg_.channels[i]}));
      in = cfg_.channels[i];
      s = (s - 1) / 2;
    }
    add_linear(params_, "cls.out", in * s * s, cfg_.categories.size(), rng);
  }

  Classifier(ClassifierConfig cfg, ParameterStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {}

  const ClassifierConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  Tensor<T> input(const StrokeSequence& normalized) const {
    const Image img = downsample_max(rasterize(normalized), static_cast<int>(cfg_.input_size));
    return Tensor<T>(Shape{1, 1, cfg_.input_size, cfg_.input_size}, std::vector<T>(img.pixels.begin(), img.pixels.end()));
  }

  // images [N, 1, S, S] -> logits [N, C]
  Var<T> logits(Binder<T>& p, Var<T> images) const {
    Var<T> x = images;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
      const std::string n = "cls.conv" + std::to_string(i);
      x = maxpool2d(relu(conv2d(x, p(n + ".w"), p(n + ".b"))), 2);
    }
    const std::size_t batch = x.value().extent(0);
    return linear(p, "cls.out", reshape(x, {batch, x.value().size() / batch}));
  }

  std::size_t predict(const StrokeSequence& normalized) const {
    Tape<T> tape;
    Binder<T> p(tape, params_, true);
    const auto& l = logits(p, tape.constant(input(normalized))).value();
    return static_cast<std::size_t>(std::max_element(l.data(), l.data() + l.size()) - l.data());
  }

 private:
  ClassifierConfig cfg_;
  ParameterStore<T> params_;
};

// Cross-entropy with Adam at a fixed learning rate over full-dataset batches.
template <class T>
std::vector<double> train_classifier(Classifier<T>& cls, const Dataset& ds, std::size_t steps, double lr, std::uint64_t seed, std::size_t batch = 64) {
  if (ds.size() == 0) throw std::invalid_argument("train_classifier: empty dataset");
  const std::size_t s = cls.config().input_size, c = cls.config().categories.size();
  std::vector<Tensor<T>> inputs;
  for (auto& sk : ds.sketches) inputs.push_back(cls.input(sk));
  Adam<T> adam;
  Rng rng(mix_seed(seed, 3));
  std::vector<std::size_t> order(ds.size());
  std::vector<double> losses;
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t n = std::min(batch, ds.size());
    Tensor<T> x(Shape{n, 1, s, s}), onehot(Shape{n, c});
    for (std::size_t b = 0; b < n; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t id = order[cursor++];
      std::copy_n(inputs[id].data(), s * s, x.data() + b * s * s);
      onehot(b, ds.labels[id]) = T{1};
    }
    Tape<T> tape;
    Binder<T> p(tape, cls.params());
    Var<T> loss = scale(mean(sum(mul(log_softmax(cls.logits(p, tape.constant(std::move(x)))), tape.constant(std::move(onehot))), 1)), T{-1});
    adam.step(cls.params(), p.named(tape.gradient(loss)), lr);
    losses.push_back(static_cast<double>(loss.value().item()));
  }
  return losses;
}

template <class T>
void save_classifier(std::ostream& os, const Classifier<T>& cls) {
  save_parameters(os, cls.config().describe(), cls.params());
}

template <class T>
Classifier<T> load_classifier(std::istream& is) {
  auto st = load_parameters<T>(is);
  return Classifier<T>(ClassifierConfig::from_text(st.header), std::move(st.params));
}

// ---------------------------------------------------------------------------
// Regeneration, healing and evaluation

struct EvalConfig {
  double mask_prob = 0.0;
  std::uint64_t seed = 0;
  double temperature = 0.1;
  std::vector<std::size_t> ks{1, 10, 50};
  std::size_t threads = 1;
  bool cosine = false;  // distance for retrieval; Euclidean by default
};

// Mask and generation streams depend only on the sketch id and the global seed.
inline std::uint64_t mask_seed(std::size_t id, std::uint64_t seed) { return mix_seed(id, seed); }
inline std::uint64_t sample_seed(std::size_t id, std::uint64_t seed) { return mix_seed(id, ~seed); }

struct Regenerated {
  RasterCanvas masked;
  std::vector<std::size_t> masked_patches;
  std::vector<double> input_code;  // μ of the (possibly masked) input
  StrokeSequence generated;        // in canvas units, not normalized
  std::vector<double> output_code; // μ̂ of the generated sketch; empty if nothing was drawn
};

// Rasterize, mask, encode, generate, then re-encode the generated sketch.
template <class T>
Regenerated regenerate(const Model<T>& model, const StrokeSequence& normalized, std::size_t id, double mask_prob, std::uint64_t seed,
                       double temperature, bool reencode = true) {
  Regenerated r;
  MaskSpec mask{mask_prob, mask_seed(id, seed), {}};
  const auto images = sketch_images<T>(normalized, model.config(), &mask, &r.masked);
  r.masked_patches = mask.applied;
  r.input_code = encode_sketch(model, images).mu;
  Rng rng(sample_seed(id, seed));
  r.generated = generate(model, r.input_code, temperature, rng);
  if (reencode && !r.generated.empty()) r.output_code = encode_sketch(model, sketch_images<T>(normalize(r.generated), model.config())).mu;
  return r;
}

struct HealResult {
  RasterCanvas masked;
  std::vector<std::size_t> masked_patches;
  StrokeSequence generated;
};

template <class T>
HealResult heal(const Model<T>& model, const StrokeSequence& normalized, double mask_prob, std::uint64_t seed, double temperature = 0.1,
                std::size_t id = 0) {
  auto r = regenerate(model, normalized, id, mask_prob, seed, temperature, false);
  return {std::move(r.masked), std::move(r.masked_patches), std::move(r.generated)};
}

// Gallery of clean-input codes, one per sketch, in id order.
template <class T>
std::vector<std::vector<double>> build_gallery(const Model<T>& model, const Dataset& ds) {
  std::vector<std::vector<double>> g;
  for (auto& s : ds.sketches) g.push_back(encode_sketch(model, sketch_images<T>(s, model.config())).mu);
  return g;
}

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

inline double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na < kZeroNorm * kZeroNorm || nb < kZeroNorm * kZeroNorm) return 1.0;
  return 1.0 - dot / std::sqrt(na * nb);
}

// Rank of gallery entry i for query i: 1 + number of entries strictly closer.
// An empty query ranks last.
inline std::vector<std::size_t> retrieval_ranks(const std::vector<std::vector<double>>& gallery, const std::vector<std::vector<double>>& queries,
                                                bool cosine = false) {
  if (gallery.empty()) throw std::invalid_argument("retrieval: empty gallery");
  if (queries.size() != gallery.size()) throw std::invalid_argument("retrieval: one query per gallery entry expected");
  std::vector<std::size_t> ranks(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i].empty()) {
      ranks[i] = gallery.size();
      continue;
    }
    auto dist = [&](const std::vector<double>& g) {
      if (g.size() != queries[i].size()) throw std::invalid_argument("retrieval: code length mismatch");
      return cosine ? cosine_distance(queries[i], g) : squared_distance(queries[i], g);
    };
    const double own = dist(gallery[i]);
    std::size_t closer = 0;
    for (std::size_t j = 0; j < gallery.size(); ++j)
      if (j != i && dist(gallery[j]) < own) ++closer;
    ranks[i] = closer + 1;
  }
  return ranks;
}

// Percentage of ranks within each k.
inline std::vector<double> retrieval_rates(const std::vector<std::size_t>& ranks, const std::vector<std::size_t>& ks) {
  std::vector<double> out;
  for (auto k : ks) {
    const auto hit = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
    out.push_back(ranks.empty() ? 0.0 : 100.0 * static_cast<double>(hit) / static_cast<double>(ranks.size()));
  }
  return out;
}

// Percentage of predictions equal to the labels.
inline double recognition_rate(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels) {
  if (predicted.size() != labels.size()) throw std::invalid_argument("recognition_rate: size mismatch");
  if (predicted.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(predicted.size());
}

// Runs fn(i) for i in [0, n) on up to `threads` workers with static striding.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct EvalReport {
  std::uint64_t fingerprint = 0;
  double mask_prob = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> ks;
  std::vector<double> ret;
  std::vector<std::size_t> ranks;
  std::optional<double> rec;
  std::vector<StrokeSequence> generated;
};

template <class T>
EvalReport evaluate(const Model<T>& model, const Dataset& ds, const EvalConfig& cfg, const Classifier<T>* classifier = nullptr) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty gallery");
  if (classifier && classifier->config().categories != ds.categories)
    throw std::invalid_argument("evaluate: classifier categories do not match the dataset");
  EvalReport rep;
  rep.fingerprint = model.config().fingerprint();
  rep.mask_prob = cfg.mask_prob;
  rep.seed = cfg.seed;
  rep.ks = cfg.ks;
  const std::size_t n = ds.size();
  std::vector<std::vector<double>> gallery(n), queries(n);
  std::vector<std::size_t> predicted(n);
  rep.generated.resize(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    gallery[i] = encode_sketch(model, sketch_images<T>(ds.sketches[i], model.config())).mu;
    auto r = regenerate(model, ds.sketches[i], i, cfg.mask_prob, cfg.seed, cfg.temperature);
    queries[i] = std::move(r.output_code);
    if (classifier) predicted[i] = r.generated.empty() ? ds.categories.size() : classifier->predict(normalize(r.generated));
    rep.generated[i] = std::move(r.generated);
  });
  rep.ranks = retrieval_ranks(gallery, queries, cfg.cosine);
  rep.ret = retrieval_rates(rep.ranks, cfg.ks);
  if (classifier) rep.rec = recognition_rate(predicted, ds.labels);
  return rep;
}

inline std::string fingerprint_hex(std::uint64_t fp) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fp;
  return os.str();
}

inline nlohmann::json metrics_json(const EvalReport& rep) {
  nlohmann::json j;
  j["config_fingerprint"] = fingerprint_hex(rep.fingerprint);
  j["mask_prob"] = rep.mask_prob;
  j["seed"] = rep.seed;
  j["count"] = rep.ranks.size();
  for (std::size_t i = 0; i < rep.ks.size(); ++i) j["ret@" + std::to_string(rep.ks[i])] = rep.ret[i];
  if (rep.rec) {
    j["rec"] = *rep.rec;
    j["rec_classifier"] = "bundled 4-layer CNN; not comparable to sketch-a-net numbers";
  } else {
    j["rec"] = nullptr;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Latent interpolation

// y_i = (1 - t_i) y_a + t_i y_b with t_i = i / (steps - 1).
inline std::vector<std::vector<double>> interpolate_codes(const std::vector<double>& ya, const std::vector<double>& yb, std::size_t steps) {
  if (steps < 2) throw std::invalid_argument("interpolate: steps must be >= 2");
  if (ya.size() != yb.size()) throw std::invalid_argument("interpolate: code length mismatch");
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(steps - 1);
    std::vector<double> y(ya.size());
    for (std::size_t d = 0; d < y.size(); ++d) y[d] = (1 - t) * ya[d] + t * yb[d];
    out.push_back(std::move(y));
  }
  return out;
}

// Each code is decoded from the same seed.
template <class T>
std::vector<StrokeSequence> interpolate_latents(const Model<T>& model, const std::vector<double>& ya, const std::vector<double>& yb, std::size_t steps,
                                                double temperature, std::uint64_t seed) {
  std::vector<StrokeSequence> out;
  for (auto& y : interpolate_codes(ya, yb, steps)) {
    Rng rng(seed);
    out.push_back(generate(model, y, temperature, rng));
  }
  return out;
}

}  // namespace dcg
