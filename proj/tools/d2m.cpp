// SPDX-License-Identifier: Apache-2.0
//
// d2m: command-line front end for the monitoring pipeline.
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "d2m/d2m.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

// Thrown for argument combinations CLI11 cannot express.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw d2m::Error(d2m::Errc::IoFailure, "cannot hash " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

// Collects what a run did; written next to its artifact.
class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)), start_(Clock::now()) {}

  json config = json::object();
  json seeds = json::object();

  void input(const fs::path& p) { inputs_.push_back(p.string()); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  // Records the milliseconds since the previous mark (or the start).
  void mark(const std::string& phase) {
    const auto now = Clock::now();
    timings_[phase] = std::chrono::duration<double, std::milli>(now - last_).count();
    last_ = now;
  }

  void write(const fs::path& path) const {
    json j;
    j["command"] = command_;
    j["config"] = config;
    j["seeds"] = seeds;
    j["inputs"] = inputs_;
    json outs = json::array();
    for (const auto& p : outputs_) {
      if (fs::is_directory(p)) {
        for (const auto& entry : fs::directory_iterator(p)) {
          if (entry.is_regular_file() && entry.path() != path) {
            outs.push_back({{"path", entry.path().string()}, {"sha256", sha256_file(entry.path())}});
          }
        }
      } else {
        outs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
      }
    }
    j["outputs"] = outs;
    json t = timings_;
    t["total_ms"] = std::chrono::duration<double, std::milli>(Clock::now() - start_).count();
    j["timings"] = t;
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw d2m::Error(d2m::Errc::IoFailure, "cannot write manifest " + path.string());
  }

 private:
  std::string command_;
  Clock::time_point start_;
  Clock::time_point last_ = start_;
  std::vector<std::string> inputs_;
  std::vector<fs::path> outputs_;
  json timings_ = json::object();
};

fs::path manifest_path_for(const fs::path& artifact) { return fs::path(artifact.string() + ".manifest.json"); }

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw d2m::Error(d2m::Errc::IoFailure, "cannot write " + path.string());
  return out;
}

void write_json(const fs::path& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

const std::map<std::string, d2m::Arch> kArchs = {
    {"lp", d2m::Arch::LP}, {"mlp", d2m::Arch::MLP}, {"timeattn", d2m::Arch::TimeAttn}, {"lstm", d2m::Arch::LSTM}};
const std::map<std::string, d2m::Readout> kReadouts = {{"last", d2m::Readout::LastStep},
                                                       {"mean", d2m::Readout::Mean},
                                                       {"mv", d2m::Readout::MV},
                                                       {"sequence", d2m::Readout::Sequence}};

struct TrainFlags {
  d2m::TrainConfig cfg;
  bool grid = false;
  double grid_ratio = 0.8;

  void add(CLI::App* app) {
    app->add_option("--lr", cfg.lr, "Adam learning rate")->capture_default_str();
    app->add_option("--weight-decay", cfg.weight_decay, "L2 weight decay")->capture_default_str();
    app->add_option("--dropout", cfg.dropout, "dropout probability")->capture_default_str();
    app->add_option("--epochs", cfg.epochs)->capture_default_str();
    app->add_option("--batch-size", cfg.batch_size)->capture_default_str();
    app->add_flag("--grid", grid, "tune lr/weight decay/dropout over the architecture's default grid");
    app->add_option("--grid-ratio", grid_ratio, "train fraction of the tuning split")->capture_default_str();
  }
};

json train_config_json(const d2m::TrainConfig& c) { return d2m::to_json(c); }

// ---------------------------------------------------------------------------

struct SynthCmd {
  d2m::SynthConfig cfg;
  std::string out = "synth.d2t";

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("synth", "generate a synthetic trajectory dataset");
    app->add_option("--out", out, "dataset path")->capture_default_str();
    app->add_option("--samples", cfg.samples)->capture_default_str();
    app->add_option("--steps", cfg.steps)->capture_default_str();
    app->add_option("--dim", cfg.dim)->capture_default_str();
    app->add_option("--hard-fraction", cfg.hard_fraction)->capture_default_str();
    app->add_option("--seed", cfg.seed)->capture_default_str();
  }

  int run(unsigned threads) {
    Manifest m("synth");
    m.config = {{"samples", cfg.samples}, {"steps", cfg.steps}, {"dim", cfg.dim}, {"hard_fraction", cfg.hard_fraction}};
    m.seeds = {{"seed", cfg.seed}};
    const auto ds = d2m::generate(cfg, threads);
    m.mark("generate_ms");
    d2m::write_dataset(ds, out);
    m.mark("write_ms");
    m.output(out);
    m.write(manifest_path_for(out));
    std::cout << "wrote " << ds.size() << " trajectories to " << out << '\n';
    return 0;
  }
};

struct TrainCmd {
  std::string data, out = "probe.d2p", probe, readout;
  d2m::ProbeSpec spec;
  TrainFlags flags;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("train", "train a probe with the given readout");
    app->add_option("--data", data, "training dataset")->required();
    app->add_option("--probe", probe)->required()->check(CLI::IsMember({"lp", "mlp", "timeattn", "lstm"}));
    app->add_option("--readout", readout)->required()->check(CLI::IsMember({"last", "mean", "mv", "sequence"}));
    app->add_option("--out", out, "probe path")->capture_default_str();
    app->add_option("--seed", flags.cfg.seed)->capture_default_str();
    app->add_option("--hidden", spec.hidden, "MLP/TimeAttn head width")->capture_default_str();
    app->add_option("--attn-dim", spec.attn_dim)->capture_default_str();
    app->add_option("--proj-dim", spec.proj_dim)->capture_default_str();
    app->add_option("--lstm-hidden", spec.lstm_hidden)->capture_default_str();
    flags.add(app);
  }

  int run(unsigned threads) {
    spec.arch = kArchs.at(probe);
    spec.readout = kReadouts.at(readout);
    spec.dim = 1;  // checked against the data below
    try {
      d2m::validate(spec);
      d2m::validate(flags.cfg);
    } catch (const d2m::Error& e) {
      throw UsageError(e.what());
    }
    Manifest m("train");
    m.input(data);
    const auto ds = d2m::read_dataset(data);
    m.mark("load_ms");
    spec.dim = ds.dim;
    d2m::Probe p;
    json grid_json;
    if (flags.grid) {
      const auto res = d2m::grid_search(ds, spec, d2m::GridSpace::defaults_for(spec.arch), flags.grid_ratio,
                                        flags.cfg.seed, flags.cfg, threads);
      p = res.probe;
      grid_json = json::array();
      for (const auto& pt : res.outcome.points) {
        grid_json.push_back({{"config", train_config_json(pt.cfg)},
                             {"val_f1", pt.val_f1 ? json(*pt.val_f1) : json(nullptr)},
                             {"failure", pt.failure}});
      }
      flags.cfg = res.best;
    } else {
      p = d2m::fit_probe(ds, spec, flags.cfg);
    }
    m.mark("train_ms");
    d2m::write_probe(p, out);
    m.config = {{"probe", d2m::probe_metadata(p)}, {"train", train_config_json(flags.cfg)}};
    if (flags.grid) m.config["grid"] = grid_json;
    m.seeds = {{"seed", flags.cfg.seed}};
    m.output(out);
    m.write(manifest_path_for(out));
    std::cout << "wrote " << probe << "/" << readout << " probe (" << d2m::param_count(p.spec) << " params) to "
              << out << '\n';
    return 0;
  }
};

struct OofCmd {
  std::string data, out = "oof.csv";
  std::size_t folds = 5;
  std::uint64_t seed = 2026;
  double target_ratio = 0.5;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("oof", "out-of-fold base-probe margins");
    app->add_option("--data", data)->required();
    app->add_option("--out", out, "margins CSV")->capture_default_str();
    app->add_option("--folds", folds)->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--target-ratio", target_ratio, "quantile used to report tau")->capture_default_str();
  }

  int run(unsigned threads) {
    Manifest m("oof");
    m.input(data);
    const auto ds = d2m::read_dataset(data);
    m.mark("load_ms");
    const auto oof = d2m::oof_margins(ds, folds, seed, d2m::base_probe_config(), threads);
    const double tau = d2m::select_tau(oof, target_ratio);
    m.mark("oof_ms");
    {
      auto f = open_out(out);
      d2m::write_oof_csv(f, oof);
    }
    m.config = {{"folds", folds}, {"target_ratio", target_ratio}, {"tau", tau},
                {"base_config", train_config_json(d2m::base_probe_config())}};
    m.seeds = {{"seed", seed}};
    m.output(out);
    m.write(manifest_path_for(out));
    std::cout << std::setprecision(17) << "tau " << tau << '\n';
    return 0;
  }
};

struct CascadeTrainCmd {
  std::string data, out = "bundle", expert = "mlp";
  d2m::CascadeOptions opts;
  TrainFlags flags;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("cascade-train", "train the base probe, tau, and the window expert");
    app->add_option("--data", data)->required();
    app->add_option("--out", out, "bundle directory")->capture_default_str();
    app->add_option("--expert", expert)->check(CLI::IsMember({"mlp", "timeattn"}))->capture_default_str();
    app->add_option("--folds", opts.folds)->capture_default_str();
    app->add_option("--target-ratio", opts.target_ratio)->capture_default_str();
    app->add_option("--seed", opts.seed)->capture_default_str();
    app->add_option("--hidden", opts.hidden)->capture_default_str();
    app->add_option("--attn-dim", opts.attn_dim)->capture_default_str();
    flags.cfg = opts.expert_cfg;
    flags.add(app);
  }

  int run(unsigned threads) {
    opts.expert_arch = kArchs.at(expert);
    opts.expert_cfg = flags.cfg;
    if (flags.grid) opts.expert_grid = d2m::GridSpace::defaults_for(opts.expert_arch);
    opts.grid_ratio = flags.grid_ratio;
    if (!(opts.target_ratio > 0.0 && opts.target_ratio < 1.0)) throw UsageError("--target-ratio must lie in (0,1)");
    try {
      d2m::validate(opts.expert_cfg);
    } catch (const d2m::Error& e) {
      throw UsageError(e.what());
    }
    Manifest m("cascade-train");
    m.input(data);
    const auto ds = d2m::read_dataset(data);
    m.mark("load_ms");
    const auto b = d2m::train_cascade(ds, opts, threads);
    m.mark("train_ms");
    d2m::write_bundle(b, out);
    m.config = d2m::cascade_metadata(b);
    m.config["expert"] = d2m::probe_metadata(b.expert);
    m.seeds = {{"seed", opts.seed}};
    m.output(out);
    m.write(fs::path(out) / "manifest.json");
    std::cout << std::setprecision(17) << "tau " << b.tau << ", expert trained on " << b.expert_train_count
              << " windows\n";
    return 0;
  }
};

struct SelectLambdaCmd {
  std::string bundle, data, sweep_out;
  bool retune_tau = false;
  std::vector<double> ratios = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("select-lambda", "pick lambda by validation macro-F1 and store it in the bundle");
    app->add_option("--bundle", bundle)->required();
    app->add_option("--data", data, "labeled validation set")->required();
    app->add_flag("--retune-tau", retune_tau, "also re-select tau on the validation set (cross-domain transfer)");
    app->add_option("--tau-ratios", ratios, "target ratios searched with --retune-tau")->capture_default_str();
    app->add_option("--sweep-out", sweep_out, "optional CSV of lambda,f1");
  }

  int run(unsigned threads) {
    Manifest m("select-lambda");
    m.input(bundle);
    m.input(data);
    auto b = d2m::read_bundle(bundle);
    const auto val = d2m::read_dataset(data);
    m.mark("load_ms");
    if (retune_tau) {
      const auto choice = d2m::retune_tau_lambda(b, val, ratios, threads);
      m.config["retuned"] = {{"ratio", choice.ratio}, {"tau", choice.tau}, {"previous_tau", b.tau}};
      b.tau = choice.tau;
    }
    const auto sweep = d2m::select_lambda(b, val, threads);
    b.lambda = sweep.best;
    m.mark("select_ms");
    d2m::write_bundle(b, bundle);
    if (!sweep_out.empty()) {
      auto f = open_out(sweep_out);
      f << "lambda,f1\n" << std::setprecision(17);
      for (std::size_t l = 0; l < sweep.f1.size(); ++l) f << l << ',' << sweep.f1[l] << '\n';
      m.output(sweep_out);
    }
    m.config["lambda"] = sweep.best;
    m.config["val_f1"] = sweep.f1[sweep.best];
    m.config["tau"] = b.tau;
    m.seeds = {{"seed", b.seed}};
    m.output(fs::path(bundle) / "cascade.json");
    m.write(fs::path(bundle) / "select_lambda.manifest.json");
    std::cout << "lambda " << sweep.best << " (val macro-F1 " << sweep.f1[sweep.best] << ")\n";
    return 0;
  }
};

struct ModelFlags {
  std::string bundle, probe;
  void add(CLI::App* app) {
    auto* b = app->add_option("--bundle", bundle, "cascade bundle directory");
    auto* p = app->add_option("--probe", probe, "single probe file");
    b->excludes(p);
  }
  void check() const {
    if (bundle.empty() == probe.empty()) throw UsageError("give exactly one of --bundle or --probe");
  }
};

struct EvalCmd {
  std::string data, out = "report.json", routes = "routes.csv";
  ModelFlags model;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("eval", "score a bundle or probe on a labeled dataset");
    app->add_option("--data", data)->required();
    model.add(app);
    app->add_option("--out", out, "report JSON")->capture_default_str();
    app->add_option("--routes", routes, "per-sample routing CSV (bundles only)")->capture_default_str();
  }

  int run(unsigned threads) {
    model.check();
    Manifest m("eval");
    m.input(data);
    const auto ds = d2m::read_dataset(data);
    d2m::Report r;
    if (!model.bundle.empty()) {
      m.input(model.bundle);
      const auto b = d2m::read_bundle(model.bundle);
      m.mark("load_ms");
      r = d2m::evaluate(b, ds, threads);
      m.config = d2m::cascade_metadata(b);
      m.seeds = {{"seed", b.seed}};
    } else {
      m.input(model.probe);
      const auto p = d2m::read_probe(model.probe);
      m.mark("load_ms");
      r = d2m::evaluate(p, ds, threads);
      m.config = d2m::probe_metadata(p);
    }
    m.mark("evaluate_ms");
    const auto j = d2m::report_json(r);
    write_json(out, j);
    m.output(out);
    if (!model.bundle.empty()) {
      auto f = open_out(routes);
      d2m::write_routes_csv(f, r.routes);
      f.close();
      m.output(routes);
    }
    m.write(manifest_path_for(out));
    std::cout << j.dump(2) << '\n';
    return 0;
  }
};

struct AnalyzeCmd {
  std::string data, bundle, out_dir = "analysis";
  std::size_t folds = 5, bins = 20, max_lag = 8;
  std::uint64_t seed = 2026;
  double target_ratio = 0.5;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("analyze", "margin crossing and persistence statistics");
    app->add_option("--data", data)->required();
    app->add_option("--bundle", bundle, "score with the bundle's base probe and tau instead of OOF margins");
    app->add_option("--out-dir", out_dir)->capture_default_str();
    app->add_option("--folds", folds)->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--target-ratio", target_ratio)->capture_default_str();
    app->add_option("--bins", bins)->capture_default_str();
    app->add_option("--max-lag", max_lag)->capture_default_str();
  }

  int run(unsigned threads) {
    Manifest m("analyze");
    m.input(data);
    const auto ds = d2m::read_dataset(data);
    std::vector<std::vector<double>> margins(ds.size());
    double tau = 0.0;
    if (!bundle.empty()) {
      m.input(bundle);
      const auto b = d2m::read_bundle(bundle);
      d2m::parallel_for(ds.size(), threads,
                        [&](std::size_t i) { margins[i] = d2m::step_margins(b.base, ds.samples[i]); });
      tau = b.tau;
      m.seeds = {{"seed", b.seed}};
    } else {
      const auto oof = d2m::oof_margins(ds, folds, seed, d2m::base_probe_config(), threads);
      tau = d2m::select_tau(oof, target_ratio);
      margins = oof.margins;
      m.seeds = {{"seed", seed}};
      m.config = {{"folds", folds}, {"target_ratio", target_ratio}};
    }
    m.mark("margins_ms");
    const auto edges = d2m::default_crossing_edges(margins, bins);
    const auto crossing = d2m::crossing_probability(margins, edges);
    const auto persistence = d2m::persistence_curve(margins, tau, max_lag);
    m.mark("analyze_ms");
    fs::create_directories(out_dir);
    const auto cpath = fs::path(out_dir) / "crossing.csv", ppath = fs::path(out_dir) / "persistence.csv";
    {
      auto f = open_out(cpath);
      d2m::write_crossing_csv(f, crossing);
      auto g = open_out(ppath);
      d2m::write_persistence_csv(g, persistence);
    }
    m.config["tau"] = tau;
    m.config["bins"] = bins;
    m.config["max_lag"] = max_lag;
    m.output(cpath);
    m.output(ppath);
    m.write(fs::path(out_dir) / "manifest.json");
    std::cout << "wrote " << cpath.string() << " and " << ppath.string() << '\n';
    return 0;
  }
};

struct FlopsCmd {
  std::size_t dim = 4096, steps = 32;
  d2m::ProbeSpec base;
  std::string convention = "full", out;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("flops", "analytic parameter and FLOP table");
    app->add_option("--dim", dim)->capture_default_str();
    app->add_option("--steps", steps)->capture_default_str();
    app->add_option("--hidden", base.hidden)->capture_default_str();
    app->add_option("--attn-dim", base.attn_dim)->capture_default_str();
    app->add_option("--proj-dim", base.proj_dim)->capture_default_str();
    app->add_option("--lstm-hidden", base.lstm_hidden)->capture_default_str();
    app->add_option("--convention", convention, "timeattn cost: full or dominant terms only")
        ->check(CLI::IsMember({"full", "dominant"}))
        ->capture_default_str();
    app->add_option("--out", out, "also write the table as CSV");
  }

  int run(unsigned) {
    Manifest m("flops");
    const std::pair<d2m::Arch, d2m::Readout> rows[] = {
        {d2m::Arch::LP, d2m::Readout::LastStep}, {d2m::Arch::MLP, d2m::Readout::LastStep},
        {d2m::Arch::LP, d2m::Readout::MV},       {d2m::Arch::LP, d2m::Readout::Mean},
        {d2m::Arch::MLP, d2m::Readout::MV},      {d2m::Arch::MLP, d2m::Readout::Mean},
        {d2m::Arch::TimeAttn, d2m::Readout::Sequence}, {d2m::Arch::LSTM, d2m::Readout::Sequence}};
    const auto conv = convention == "full" ? d2m::FlopConvention::Full : d2m::FlopConvention::DominantTerms;
    std::ostringstream csv;
    csv << "probe,readout,params,mflops\n";
    for (auto [arch, readout] : rows) {
      auto spec = base;
      spec.arch = arch;
      spec.readout = readout;
      spec.dim = dim;
      csv << d2m::to_string(arch) << ',' << d2m::to_string(readout) << ',' << d2m::param_count(spec) << ','
          << d2m::flops_estimate(spec, static_cast<double>(steps), conv) / 1e6 << '\n';
    }
    std::cout << csv.str();
    if (!out.empty()) {
      auto f = open_out(out);
      f << csv.str();
      f.close();
      m.config = {{"dim", dim}, {"steps", steps}, {"convention", convention}};
      m.output(out);
      m.write(manifest_path_for(out));
    }
    return 0;
  }
};

struct BenchCmd {
  std::string data;
  ModelFlags model;
  std::size_t repeat = 3;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("bench", "post-hoc inference timing over a dataset (milliseconds)");
    app->add_option("--data", data)->required();
    model.add(app);
    app->add_option("--repeat", repeat, "timed passes; the fastest is reported")->capture_default_str();
  }

  // Single-step readouts read only the last step; Mean includes pooling;
  // sequence probes see the whole trajectory; cascades pay for the base
  // margins on every sample plus the expert on routed ones.
  int run(unsigned threads) {
    model.check();
    if (repeat < 1) throw UsageError("--repeat must be >= 1");
    const auto ds = d2m::read_dataset(data);
    std::function<void()> pass;
    std::optional<d2m::CascadeBundle> b;
    std::optional<d2m::Probe> p;
    if (!model.bundle.empty()) {
      b = d2m::read_bundle(model.bundle);
      if (!b->lambda) throw d2m::Error(d2m::Errc::InvalidArgument, "bundle has no lambda; run select-lambda");
      pass = [&] { d2m::classify_all(*b, ds, threads); };
    } else {
      p = d2m::read_probe(model.probe);
      pass = [&] { d2m::predict_labels(*p, ds, threads); };
    }
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < repeat; ++r) {
      const auto t0 = Clock::now();
      pass();
      best = std::min(best, std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
    }
    json j = {{"samples", ds.size()}, {"ms", best}, {"ms_per_sample", best / static_cast<double>(ds.size())},
              {"threads", threads}};
    std::cout << j.dump(2) << '\n';
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"d2m: hesitation-aware two-tier safety monitor"};
  app.require_subcommand(1);
  unsigned threads = d2m::threads_from_env();
  app.add_option("--threads", threads, "worker threads (default: D2M_THREADS, else 1)")
      ->check(CLI::PositiveNumber);

  SynthCmd synth;
  TrainCmd train;
  OofCmd oof;
  CascadeTrainCmd cascade;
  SelectLambdaCmd select;
  EvalCmd eval;
  AnalyzeCmd analyze;
  FlopsCmd flops;
  BenchCmd bench;
  synth.add(app);
  train.add(app);
  oof.add(app);
  cascade.add(app);
  select.add(app);
  eval.add(app);
  analyze.add(app);
  flops.add(app);
  bench.add(app);
  // subcommands accept --threads too
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "synth") return synth.run(threads);
    if (name == "train") return train.run(threads);
    if (name == "oof") return oof.run(threads);
    if (name == "cascade-train") return cascade.run(threads);
    if (name == "select-lambda") return select.run(threads);
    if (name == "eval") return eval.run(threads);
    if (name == "analyze") return analyze.run(threads);
    if (name == "flops") return flops.run(threads);
    if (name == "bench") return bench.run(threads);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const d2m::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
