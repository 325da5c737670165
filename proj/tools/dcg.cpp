// dcg: command-line front end for training, evaluating and sampling sketch models.

#include <png.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dcg/gradcheck.hpp"
#include "dcg/training.hpp"

namespace fs = std::filesystem;
using namespace dcg;
using json = nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMissingCheckpoint = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingCheckpoint : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Artifacts

void write_png(const fs::path& path, const Image& img) {
  FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  std::vector<png_byte> row(static_cast<std::size_t>(img.width));
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  // Ink is dark on a white background.
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) row[static_cast<std::size_t>(x)] = static_cast<png_byte>(255 - std::lround(255.0 * std::clamp(img.at(x, y), 0.f, 1.f)));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

template <class T>
void write_csv(const fs::path& path, const Tensor<T>& m) {
  std::ofstream os(path);
  os << std::setprecision(17);
  for (std::size_t i = 0; i < m.extent(0); ++i) {
    for (std::size_t j = 0; j < m.extent(1); ++j) os << (j ? "," : "") << m(i, j);
    os << '\n';
  }
}

void write_ndjson(const fs::path& path, const std::vector<StrokeSequence>& seqs, const std::vector<std::string>& words) {
  std::ofstream os(path);
  for (std::size_t i = 0; i < seqs.size(); ++i) os << to_ndjson_line(seqs[i], words[i], std::to_string(i)) << '\n';
}

Image render(const StrokeSequence& seq) { return seq.empty() ? blank_canvas() : rasterize(normalize(seq)); }

// ---------------------------------------------------------------------------
// Run configuration: preset defaults < config file < flags.

const std::vector<std::string> kRunKeys = {"scale", "data", "out", "ckpt", "seed", "epochs", "batch", "max_steps", "lr0", "decay", "mask",
                                           "threads", "temperature", "count", "steps", "index", "a", "b", "shapes", "classifier",
                                           "classifier_steps", "cosine", "dump_graph"};
const std::vector<std::string> kModelKeys = {"patches", "input_size", "channels", "embed_dim", "latent_dim", "mlp_hidden", "decoder_hidden",
                                             "mixtures", "max_seq_len", "offset_scale", "abs_pe", "rel_pe", "pe_in_edges"};

struct RunConfig {
  std::string command;
  KeyValues kv;

  bool has(const std::string& k) const { return kv.find(k) != nullptr; }
  std::string str(const std::string& k, const std::string& def = "") const {
    auto* v = kv.find(k);
    return v ? *v : def;
  }
  std::uint64_t u64(const std::string& k, std::uint64_t def) const {
    auto* v = kv.find(k);
    return v ? std::stoull(*v) : def;
  }
  double num(const std::string& k, double def) const {
    auto* v = kv.find(k);
    return v ? std::stod(*v) : def;
  }
  bool flag(const std::string& k) const {
    auto* v = kv.find(k);
    return v && (*v == "1" || *v == "true");
  }
  bool toy() const { return str("scale", "paper") == "toy"; }

  fs::path out() const {
    if (auto* v = kv.find("out")) return *v;
    if (const char* env = std::getenv("DCG_OUT_DIR")) return env;
    return "dcg_out";
  }

  ModelConfig model() const { return ModelConfig::from_keys(kv, toy() ? ModelConfig::toy() : ModelConfig::paper()); }

  TrainConfig train() const {
    TrainConfig t;
    t.epochs = u64("epochs", toy() ? 20 : 1);
    t.batch = u64("batch", toy() ? 4 : 256);
    t.lr0 = num("lr0", t.lr0);
    t.decay = num("decay", t.decay);
    t.seed = u64("seed", 0);
    t.max_steps = u64("max_steps", 0);
    return t;
  }

  EvalConfig eval() const {
    EvalConfig e;
    e.mask_prob = num("mask", 0.0);
    e.seed = u64("seed", 0);
    e.temperature = num("temperature", e.temperature);
    e.threads = u64("threads", 1);
    e.cosine = flag("cosine");
    return e;
  }

  // Every effective setting, including the model architecture in use.
  std::string resolved(const ModelConfig* model) const {
    std::string s = "command = " + command + "\n" + kv.str();
    if (!has("out")) s += "out = " + out().string() + "\n";
    if (model) s += "# model\n" + model->describe();
    return s;
  }
};

void persist(const RunConfig& rc, const ModelConfig* model) {
  fs::create_directories(rc.out());
  write_text(rc.out() / "resolved_config.txt", rc.resolved(model));
}

Dataset dataset(const RunConfig& rc, std::size_t max_seq_len) {
  if (!rc.has("data")) throw UsageError(rc.command + ": --data is required");
  auto ds = load_dataset(rc.str("data"), max_seq_len);
  if (ds.malformed || ds.empty || ds.too_long)
    std::cerr << "dataset: skipped " << ds.malformed << " malformed, " << ds.empty << " empty, " << ds.too_long << " too long\n";
  return ds;
}

Model<float> checkpoint(const RunConfig& rc) {
  if (!rc.has("ckpt")) throw MissingCheckpoint(rc.command + ": --ckpt is required");
  const fs::path path = rc.str("ckpt");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingCheckpoint("checkpoint not found: " + path.string());
  auto st = load_parameters<float>(is);
  const auto stored = ModelConfig::from_text(st.header);
  // Architecture flags must agree with the stored model.
  const auto expected = ModelConfig::from_keys(rc.kv, rc.has("scale") ? rc.model() : stored);
  if (expected.fingerprint() != stored.fingerprint())
    throw std::runtime_error("checkpoint architecture does not match the requested configuration:\n--- checkpoint\n" + stored.describe() +
                             "--- requested\n" + expected.describe());
  return Model<float>(stored, std::move(st.params));
}

std::size_t sketch_index(const RunConfig& rc, const std::string& key, const Dataset& ds, std::size_t def = 0) {
  const std::size_t i = rc.u64(key, def);
  if (i >= ds.size()) throw UsageError("--" + key + " " + std::to_string(i) + " out of range (dataset has " + std::to_string(ds.size()) + " sketches)");
  return i;
}

void dump_graphs(const Model<float>& model, const Dataset& ds, const fs::path& dir, std::size_t count) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < std::min(count, ds.size()); ++i) {
    const auto g = inspect_graph(model, sketch_images<float>(ds.sketches[i], model.config()));
    const std::string stem = "sketch" + std::to_string(i);
    write_csv(dir / (stem + "_A.csv"), g.adjacency);
    write_csv(dir / (stem + "_extended.csv"), g.extended);
    write_csv(dir / (stem + "_normalized.csv"), g.normalized);
  }
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const RunConfig& rc) {
  std::vector<SyntheticShape> shapes;
  std::istringstream is(rc.str("shapes", "circle,zigzag"));
  for (std::string tok; std::getline(is, tok, ',');) shapes.push_back(parse_shape(KeyValues::trim(tok)));
  const auto sets = synthetic_sketches(rc.u64("count", 32), shapes, rc.u64("seed", 0));
  persist(rc, nullptr);
  for (auto& [name, seqs] : sets) write_ndjson(rc.out() / (name + ".ndjson"), seqs, std::vector<std::string>(seqs.size(), name));
  std::cout << "wrote " << rc.u64("count", 32) << " sketches in " << sets.size() << " categories to " << rc.out() << "\n";
  return 0;
}

int cmd_ingest(const RunConfig& rc) {
  if (!rc.has("data")) throw UsageError("ingest: --data is required");
  const fs::path src = rc.str("data");
  const auto mc = rc.model();
  if (fs::exists(rc.out()) && fs::equivalent(src, rc.out())) throw UsageError("ingest: --out must differ from --data");
  std::vector<fs::path> files;
  if (fs::is_regular_file(src)) {
    files.push_back(src);
  } else {
    for (auto& e : fs::directory_iterator(src))
      if (e.path().extension() == ".ndjson") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("ingest: no .ndjson files in " + src.string());
  persist(rc, nullptr);
  json report = json::object();
  for (auto& f : files) {
    std::ifstream in(f);
    auto parsed = parse_quickdraw_ndjson(in);
    std::vector<StrokeSequence> kept;
    std::size_t too_long = 0;
    for (auto& s : parsed.sequences) {
      if (s.size() + 1 > mc.max_seq_len) {
        ++too_long;
        continue;
      }
      kept.push_back(normalize(s));
    }
    std::ofstream os(rc.out() / (f.stem().string() + ".dcs"), std::ios::binary);
    write_sketch_cache(os, kept);
    report[f.stem().string()] = {{"kept", kept.size()}, {"malformed", parsed.malformed}, {"empty", parsed.empty}, {"too_long", too_long}};
  }
  write_text(rc.out() / "ingest_report.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc) {
  const auto mc = rc.model();
  mc.validate();
  const auto tc = rc.train();
  const auto ds = dataset(rc, mc.max_seq_len);
  persist(rc, &mc);
  const auto examples = make_examples<float>(ds, mc);
  Model<float> model(mc, tc.seed);
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = train(model, examples, tc, [](const LossRecord& r) {
    if (r.step % 50 == 1) std::cout << "step " << r.step << " epoch " << r.epoch << " lr " << r.lr << " nll " << r.nll << std::endl;
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path ckpt = rc.has("ckpt") ? fs::path(rc.str("ckpt")) : rc.out() / "model.dck";
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  {
    std::ofstream os(ckpt, std::ios::binary);
    save_checkpoint(os, model);
  }
  {
    std::ofstream os(rc.out() / "loss_curve.csv");
    write_loss_curve(os, report.curve);
  }
  const std::size_t cls_steps = rc.u64("classifier_steps", rc.toy() ? 300 : 2000);
  if (cls_steps > 0) {
    Classifier<float> cls(ClassifierConfig{ds.categories}, mix_seed(tc.seed, 7));
    train_classifier(cls, ds, cls_steps, 1e-3, tc.seed);
    std::ofstream os(ckpt.parent_path().empty() ? fs::path("classifier.dck") : ckpt.parent_path() / "classifier.dck", std::ios::binary);
    save_classifier(os, cls);
  }
  if (rc.flag("dump_graph")) dump_graphs(model, ds, rc.out() / "graphs", 4);
  std::cout << "trained " << report.steps << " steps (" << report.skipped << " skipped) in " << seconds << " s; checkpoint " << ckpt << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  const auto model = checkpoint(rc);
  const auto ds = dataset(rc, model.config().max_seq_len);
  std::optional<Classifier<float>> cls;
  fs::path cls_path = rc.has("classifier") ? fs::path(rc.str("classifier")) : fs::path(rc.str("ckpt")).parent_path() / "classifier.dck";
  if (std::ifstream is(cls_path, std::ios::binary); is) {
    cls = load_classifier<float>(is);
  } else if (rc.has("classifier")) {
    throw MissingCheckpoint("classifier checkpoint not found: " + cls_path.string());
  }
  persist(rc, &model.config());
  const auto ec = rc.eval();
  const auto rep = evaluate(model, ds, ec, cls ? &*cls : nullptr);
  const std::string metrics = metrics_json(rep).dump(2) + "\n";
  write_text(rc.out() / "metrics.json", metrics);
  std::vector<std::string> words;
  for (auto l : ds.labels) words.push_back(ds.categories[l]);
  write_ndjson(rc.out() / "generated.ndjson", rep.generated, words);
  if (rc.flag("dump_graph")) dump_graphs(model, ds, rc.out() / "graphs", 4);
  std::cout << metrics;
  return 0;
}

int cmd_generate(const RunConfig& rc) {
  const auto model = checkpoint(rc);
  const auto& mc = model.config();
  const std::uint64_t seed = rc.u64("seed", 0);
  const double tau = rc.num("temperature", 0.1);
  std::vector<double> y(mc.latent_dim);
  std::string word = "sample";
  if (rc.has("data")) {
    const auto ds = dataset(rc, mc.max_seq_len);
    const std::size_t i = sketch_index(rc, "index", ds);
    y = encode_sketch(model, sketch_images<float>(ds.sketches[i], mc)).mu;
    word = ds.categories[ds.labels[i]];
    if (rc.flag("dump_graph")) dump_graphs(model, ds, rc.out() / "graphs", 1);
  } else {
    Rng rng(mix_seed(seed, 5));
    for (auto& v : y) v = standard_normal(rng);
  }
  persist(rc, &mc);
  const std::size_t count = rc.u64("count", 1);
  std::vector<StrokeSequence> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    out.push_back(generate(model, y, tau, rng));
    write_png(rc.out() / ("generated_" + std::to_string(i) + ".png"), render(out.back()));
  }
  write_ndjson(rc.out() / "generated.ndjson", out, std::vector<std::string>(count, word));
  std::cout << "wrote " << count << " sketches to " << rc.out() << "\n";
  return 0;
}

int cmd_heal(const RunConfig& rc) {
  const auto model = checkpoint(rc);
  const auto ds = dataset(rc, model.config().max_seq_len);
  const std::size_t i = sketch_index(rc, "index", ds);
  persist(rc, &model.config());
  const auto r = heal(model, ds.sketches[i], rc.num("mask", 0.0), rc.u64("seed", 0), rc.num("temperature", 0.1), i);
  write_png(rc.out() / "original.png", rasterize(ds.sketches[i]));
  write_png(rc.out() / "masked.png", r.masked);
  write_png(rc.out() / "healed.png", render(r.generated));
  write_ndjson(rc.out() / "healed.ndjson", {r.generated}, {ds.categories[ds.labels[i]]});
  write_text(rc.out() / "heal.json", json{{"index", i}, {"masked_patches", r.masked_patches}, {"points", r.generated.size()}}.dump(2) + "\n");
  if (rc.flag("dump_graph")) {
    fs::create_directories(rc.out() / "graphs");
    MaskSpec mask{rc.num("mask", 0.0), mask_seed(i, rc.u64("seed", 0)), {}};
    const auto g = inspect_graph(model, sketch_images<float>(ds.sketches[i], model.config(), &mask));
    write_csv(rc.out() / "graphs" / "masked_A.csv", g.adjacency);
    write_csv(rc.out() / "graphs" / "masked_extended.csv", g.extended);
    write_csv(rc.out() / "graphs" / "masked_normalized.csv", g.normalized);
  }
  std::cout << "masked " << r.masked_patches.size() << " of " << model.config().patches << " patches; healed sketch has " << r.generated.size()
            << " points\n";
  return 0;
}

int cmd_interpolate(const RunConfig& rc) {
  const auto model = checkpoint(rc);
  const auto ds = dataset(rc, model.config().max_seq_len);
  const std::size_t a = sketch_index(rc, "a", ds, 0), b = sketch_index(rc, "b", ds, ds.size() - 1);
  persist(rc, &model.config());
  auto code = [&](std::size_t i) { return encode_sketch(model, sketch_images<float>(ds.sketches[i], model.config())).mu; };
  const auto seqs = interpolate_latents(model, code(a), code(b), rc.u64("steps", 5), rc.num("temperature", 0.1), rc.u64("seed", 0));
  std::vector<std::string> words;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    write_png(rc.out() / ("interp_" + std::to_string(i) + ".png"), render(seqs[i]));
    words.push_back("interp_" + std::to_string(i));
  }
  write_ndjson(rc.out() / "interpolation.ndjson", seqs, words);
  std::cout << "wrote " << seqs.size() << " interpolation steps between sketches " << a << " and " << b << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& rc) {
  if (!rc.toy()) throw UsageError("gradcheck: only --scale toy is supported");
  const auto mc = ModelConfig::from_keys(rc.kv, ModelConfig::gradcheck());
  const std::uint64_t seed = rc.u64("seed", 0);
  persist(rc, &mc);
  const auto t0 = std::chrono::steady_clock::now();
  const Model<double> model(mc, seed);
  const auto rep = check_model_gradients(model, make_grad_fixture(mc, seed));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json j;
  j["loss"] = rep.loss;
  j["max_rel_error"] = rep.max_rel_error();
  j["tolerance"] = 1e-4;
  j["unreached"] = rep.unreached;
  j["passed"] = rep.passed(1e-4);
  j["seconds"] = seconds;
  for (auto& [name, g] : rep.groups) {
    j["groups"][name] = {{"coordinates", g.coordinates}, {"max_rel_error", g.max_rel_error}, {"worst", g.worst_parameter + "[" + std::to_string(g.worst_index) + "]"}};
    std::cout << std::left << std::setw(12) << name << " coords " << std::setw(6) << g.coordinates << " max rel error " << g.max_rel_error << "\n";
  }
  write_text(rc.out() / "gradcheck.json", j.dump(2) + "\n");
  std::cout << "max relative error " << rep.max_rel_error() << (rep.passed(1e-4) ? " < " : " >= ") << "1e-4\n";
  return rep.passed(1e-4) ? 0 : kExitRuntime;
}

// ---------------------------------------------------------------------------

struct Command {
  CLI::App* app;
  std::map<std::string, CLI::Option*> options;
  std::map<std::string, std::string> values;  // node-stable storage for option targets
  std::set<std::string> switches;             // keys set by flags
  std::string config;
};

void add_option(Command& c, const std::string& flag, const std::string& key, const std::string& help) {
  c.options[key] = c.app->add_option(flag, c.values[key], help);
}

void add_switch(Command& c, const std::string& flag, const std::string& key, const std::string& value, const std::string& help) {
  c.app->add_flag_function(flag, [&c, key, value](std::int64_t) {
        c.values[key] = value;
        c.switches.insert(key);
      }, help);
}

void add_count(Command& c, const std::string& flag, const std::string& key, const std::string& help) {
  add_option(c, flag, key, help);
  c.options[key]->check(CLI::NonNegativeNumber);
}

void add_common(Command& c) {
  c.app->add_option("--config", c.config, "key = value file; flags override its entries")->check(CLI::ExistingFile);
  add_option(c, "--out", "out", "output directory (default: $DCG_OUT_DIR, else ./dcg_out)");
  add_count(c, "--seed", "seed", "random seed");
  add_option(c, "--threads", "threads", "worker threads; 1 is fully deterministic");
  c.options["threads"]->check(CLI::PositiveNumber);
  add_option(c, "--scale", "scale", "model preset");
  c.options["scale"]->check(CLI::IsMember({"paper", "toy"}));
  add_option(c, "--patches", "patches", "patch count M");
  c.options["patches"]->check(CLI::PositiveNumber);
  add_switch(c, "--no-abs-pe", "abs_pe", "0", "disable the absolute positional encoding");
  add_switch(c, "--no-rel-pe", "rel_pe", "0", "disable the relative positional encoding");
  add_switch(c, "--pe-in-edges", "pe_in_edges", "1", "let positional encodings enter the edge coefficients");
  add_switch(c, "--dump-graph", "dump_graph", "1", "write adjacency matrices as CSV");
}

void add_data(Command& c) { add_option(c, "--data", "data", "dataset directory of .ndjson / .dcs files"); }
void add_ckpt(Command& c, const std::string& help) { add_option(c, "--ckpt", "ckpt", help); }
void add_sampling(Command& c) {
  add_option(c, "--temperature", "temperature", "sampling temperature in (0, 1]");
  c.options["temperature"]->check(CLI::Range(1e-6, 1.0));
}
void add_mask(Command& c) {
  add_option(c, "--mask", "mask", "patch mask probability");
  c.options["mask"]->check(CLI::Range(0.0, 1.0));
}

RunConfig resolve(const Command& c) {
  RunConfig rc;
  rc.command = c.app->get_name();
  if (!c.config.empty()) {
    std::ifstream is(c.config);
    rc.kv = KeyValues::parse(is);
    for (auto& [k, _] : rc.kv.items())
      if (std::find(kRunKeys.begin(), kRunKeys.end(), k) == kRunKeys.end() && std::find(kModelKeys.begin(), kModelKeys.end(), k) == kModelKeys.end())
        throw UsageError("config " + c.config + ": unknown key '" + k + "'");
  }
  for (auto& [key, opt] : c.options)
    if (opt->count() > 0) rc.kv.set(key, c.values.at(key));
  for (auto& key : c.switches) rc.kv.set(key, c.values.at(key));
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-to-sequence sketch models: training, evaluation, synthesis and healing"};
  app.require_subcommand(1);
  std::map<std::string, std::unique_ptr<Command>> cmds;
  auto make = [&](const std::string& name, const std::string& help) -> Command& {
    auto c = std::make_unique<Command>();
    c->app = app.add_subcommand(name, help);
    add_common(*c);
    return *cmds.emplace(name, std::move(c)).first->second;
  };

  {
    auto& c = make("synth-data", "write a synthetic QuickDraw-format dataset");
    add_count(c, "--count", "count", "number of sketches");
    add_option(c, "--shapes", "shapes", "comma-separated shapes: circle, square, zigzag, two_strokes");
  }
  {
    auto& c = make("ingest", "convert QuickDraw NDJSON into normalized sketch caches");
    add_data(c);
  }
  {
    auto& c = make("train", "train a model and a category classifier");
    add_data(c);
    add_ckpt(c, "checkpoint to write (default: <out>/model.dck)");
    add_count(c, "--epochs", "epochs", "training epochs");
    add_option(c, "--batch", "batch", "batch size");
    c.options["batch"]->check(CLI::PositiveNumber);
    add_count(c, "--max-steps", "max_steps", "stop after this many steps (0: no cap)");
    add_count(c, "--classifier-steps", "classifier_steps", "classifier training steps (0: skip)");
  }
  {
    auto& c = make("eval", "Ret@k and Rec of regenerated sketches");
    add_data(c);
    add_ckpt(c, "model checkpoint");
    add_mask(c);
    add_sampling(c);
    add_option(c, "--classifier", "classifier", "classifier checkpoint (default: classifier.dck next to --ckpt)");
    add_switch(c, "--cosine", "cosine", "1", "retrieve by cosine distance instead of Euclidean");
  }
  {
    auto& c = make("generate", "sample sketches from a sketch code or a random code");
    add_data(c);
    add_ckpt(c, "model checkpoint");
    add_sampling(c);
    add_count(c, "--index", "index", "dataset sketch to encode");
    add_count(c, "--count", "count", "number of samples");
  }
  {
    auto& c = make("heal", "mask patches of a sketch and regenerate it");
    add_data(c);
    add_ckpt(c, "model checkpoint");
    add_mask(c);
    add_sampling(c);
    add_count(c, "--index", "index", "dataset sketch to heal");
  }
  {
    auto& c = make("interpolate", "decode linear interpolations between two sketch codes");
    add_data(c);
    add_ckpt(c, "model checkpoint");
    add_sampling(c);
    add_count(c, "--a", "a", "first sketch index");
    add_count(c, "--b", "b", "second sketch index");
    add_count(c, "--steps", "steps", "interpolation points including both ends");
  }
  make("gradcheck", "finite-difference check of every model gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help();
    return kExitUsage;
  }

  const std::map<std::string, int (*)(const RunConfig&)> handlers = {
      {"synth-data", cmd_synth}, {"ingest", cmd_ingest}, {"train", cmd_train},       {"eval", cmd_eval},
      {"generate", cmd_generate}, {"heal", cmd_heal},    {"interpolate", cmd_interpolate}, {"gradcheck", cmd_gradcheck}};
  for (auto& [name, c] : cmds) {
    if (!c->app->parsed()) continue;
    try {
      return handlers.at(name)(resolve(*c));
    } catch (const UsageError& e) {
      std::cerr << "error: " << e.what() << "\n" << c->app->help();
      return kExitUsage;
    } catch (const MissingCheckpoint& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitMissingCheckpoint;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitRuntime;
    }
  }
  return kExitUsage;
}
