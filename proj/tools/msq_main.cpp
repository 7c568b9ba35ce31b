// msq: train and operate multi-precision quantized classifiers that support
// hot-swap bit-width switching. Subcommands: train, eval, switch, report,
// ablate, bench. Config keys mirror the CLI flags (INI/TOML sections);
// command-line flags override config values.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical abort,
// 5 bad bundle, 6 candidate not in the bundle's set, 7 bench exactness
// failure.

#include <chrono>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "msq/msq.hpp"

namespace fs = std::filesystem;

namespace {

// Config files are [section] key = value; "[plan] epochs = 6" feeds the
// option named --plan.epochs. The file expands into argv tokens inserted
// right after the subcommand, and keys the user passed explicitly on the
// command line are skipped, so CLI flags always override config values.
// Unknown keys expand to unknown options and fail the parse.
std::vector<std::pair<std::string, std::string>> parse_config_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw msq::FormatError("cannot open config file " + path);
  std::vector<std::pair<std::string, std::string>> items;
  std::string line, section;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw msq::FormatError(path + ": config line is not key = value: " + line);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && ((value.front() == '"' && value.back() == '"') ||
                              (value.front() == '\'' && value.back() == '\'')))
      value = value.substr(1, value.size() - 2);
    items.emplace_back(section.empty() ? key : section + "." + key, value);
  }
  return items;
}

std::vector<std::string> expand_config_args(const std::vector<std::string>& args) {
  if (args.empty() || (args[0] != "train" && args[0] != "ablate")) return args;
  std::string config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;

  // option names given explicitly (normalizing the no- negation prefix)
  auto canonical = [](std::string name) {
    const auto dot = name.rfind('.');
    const auto seg = dot == std::string::npos ? 0 : dot + 1;
    if (name.compare(seg, 3, "no-") == 0) name.erase(seg, 3);
    return name;
  };
  std::unordered_set<std::string> user_keys;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i].rfind("--", 0) != 0) continue;
    std::string name = args[i].substr(2);
    const auto eq = name.find('=');
    if (eq != std::string::npos) name.resize(eq);
    user_keys.insert(canonical(name));
  }

  std::vector<std::string> out{args[0]};
  for (const auto& [key, value] : parse_config_file(config_path))
    if (!user_keys.count(canonical(key)))
      out.push_back("--" + key + "=" + value);
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;
constexpr int kExitBadBundle = 5;
constexpr int kExitCandidate = 6;
constexpr int kExitExactness = 7;

struct DatasetOpts {
  std::string kind = "synthetic";  // mnist | cifar10 | synthetic
  std::string dir = "data/mnist";
  std::int64_t limit_train = 0;  // 0 = all
  std::int64_t limit_eval = 0;
  std::int64_t synthetic_n = 4000;
  std::int64_t synthetic_eval_n = 1000;
  std::int64_t synthetic_hw = 16;
  int synthetic_classes = 10;
  std::uint64_t synthetic_seed = 1234;
  std::string augment = "auto";  // auto | on | off
};

struct ArchOpts {
  std::int64_t stem_channels = 16;
  std::vector<std::int64_t> channels = {16, 32, 32, 64, 64, 64};
  std::vector<int> strides = {1, 2, 1, 2, 1, 1};
  bool per_k_act_quant = true;
  bool per_k_bn = true;
  bool per_k_weight_quant = true;
  bool subband_scales = true;
};

struct PlanOpts {
  std::vector<int> candidates = {8, 4, 2, 1};
  std::vector<double> probs;
  std::int64_t warmup_iters = -1;
  int epochs = 6;
  std::int64_t batch = 128;
  float lr = 0.01f;
  std::vector<double> lr_decay_at = {0.5, 0.75};
  float lr_decay_factor = 0.1f;
  float weight_decay = 1e-4f;
  float momentum = 0.9f;
  std::uint64_t seed = 1;
  std::string mode = "sampled";  // sampled | joint
  std::int64_t eval_subset = 0;
};

struct LoadedData {
  msq::Dataset train, eval;
  bool augment = false;
};

LoadedData load_data(const DatasetOpts& o) {
  LoadedData out;
  if (o.kind == "mnist") {
    out.train = msq::load_idx(o.dir + "/train-images-idx3-ubyte",
                              o.dir + "/train-labels-idx1-ubyte");
    out.eval = msq::load_idx(o.dir + "/t10k-images-idx3-ubyte",
                             o.dir + "/t10k-labels-idx1-ubyte");
  } else if (o.kind == "cifar10") {
    out.train = msq::load_cifar10(o.dir, "train");
    out.eval = msq::load_cifar10(o.dir, "test");
    out.augment = true;
  } else if (o.kind == "synthetic") {
    out.train = msq::synthetic_task(o.synthetic_seed, o.synthetic_n,
                                    o.synthetic_classes, o.synthetic_hw);
    out.eval = msq::synthetic_task(o.synthetic_seed + 1, o.synthetic_eval_n,
                                   o.synthetic_classes, o.synthetic_hw);
  } else {
    throw msq::DomainError("unknown dataset kind " + o.kind);
  }
  if (o.limit_train > 0 && o.limit_train < out.train.n)
    out.train = out.train.subset(0, o.limit_train);
  if (o.limit_eval > 0 && o.limit_eval < out.eval.n)
    out.eval = out.eval.subset(0, o.limit_eval);
  if (o.augment == "on") out.augment = true;
  if (o.augment == "off") out.augment = false;
  return out;
}

msq::ModelConfig make_model_config(const msq::Dataset& train, const ArchOpts& a,
                                   const std::vector<int>& candidates,
                                   std::uint64_t seed) {
  msq::ModelConfig cfg;
  cfg.in_channels = train.c;
  cfg.image_hw = train.h;
  cfg.num_classes = train.num_classes;
  cfg.stem_channels = a.stem_channels;
  if (a.channels.size() != a.strides.size())
    throw msq::DomainError("arch.channels and arch.strides length mismatch");
  cfg.stages.clear();
  for (std::size_t i = 0; i < a.channels.size(); ++i)
    cfg.stages.push_back({a.channels[i], a.strides[i]});
  cfg.candidates = msq::CandidateSet::make(candidates);
  cfg.flags.per_k_act_quant = a.per_k_act_quant;
  cfg.flags.per_k_bn = a.per_k_bn;
  cfg.flags.per_k_weight_quant = a.per_k_weight_quant;
  cfg.flags.subband_scales = a.subband_scales;
  cfg.init_seed = seed;
  return cfg;
}

msq::TrainPlan make_plan(const PlanOpts& p, bool augment) {
  msq::TrainPlan plan;
  plan.candidates = msq::CandidateSet::make(p.candidates);
  plan.probs = p.probs;
  plan.warmup_iters = p.warmup_iters;
  plan.epochs = p.epochs;
  plan.batch_size = p.batch;
  plan.lr.initial = p.lr;
  plan.lr.decay_at = p.lr_decay_at;
  plan.lr.factor = p.lr_decay_factor;
  plan.weight_decay = p.weight_decay;
  plan.momentum = p.momentum;
  plan.seed = p.seed;
  if (p.mode == "joint") plan.joint_mode = true;
  else if (p.mode != "sampled")
    throw msq::DomainError("plan.mode must be sampled or joint");
  plan.augment = augment;
  plan.eval_subset = p.eval_subset;
  plan.validate();
  return plan;
}

void write_trainlog(const msq::TrainLog& log, const std::string& path) {
  msq::CsvWriter csv(path, "trainlog.v1", {"epoch", "step", "k", "loss"});
  for (const auto& r : log.rows) csv.row(r.epoch, r.step, r.k, r.loss);
}

void write_eval_all(const msq::TrainLog& log, const std::string& path) {
  msq::CsvWriter csv(path, "eval_all.v1", {"epoch", "bits", "accuracy"});
  for (std::size_t e = 0; e < log.eval_accuracy.size(); ++e)
    for (const auto& [k, acc] : log.eval_accuracy[e]) csv.row(e, k, acc);
}

// Shared by train and ablate.
int run_training(const DatasetOpts& dopt, const ArchOpts& aopt,
                 const PlanOpts& popt, const std::string& outdir) {
  auto data = load_data(dopt);
  auto plan = make_plan(popt, data.augment);
  auto cfg = make_model_config(data.train, aopt, popt.candidates, popt.seed);
  auto model = msq::build_model(cfg);

  fs::create_directories(outdir);
  msq::SgdState opt;
  msq::warmup(model, data.train, plan, opt);
  auto log = msq::dynamic_train(model, data.train, &data.eval, plan, opt);

  nlohmann::json meta = {
      {"dataset", dopt.kind},
      {"normalize_mean", data.train.mean},
      {"normalize_std", data.train.stdev},
      {"epochs", plan.epochs},
      {"seed", plan.seed}};
  msq::save_bundle(model, outdir + "/bundle.msq", meta);
  write_trainlog(log, outdir + "/trainlog.csv");
  write_eval_all(log, outdir + "/eval_all.csv");

  if (!log.eval_accuracy.empty()) {
    std::cout << "final accuracy:";
    for (const auto& [k, acc] : log.eval_accuracy.back())
      std::cout << " k" << k << "=" << acc;
    std::cout << "\n";
  }
  std::cout << "wrote " << outdir << "/bundle.msq\n";
  return 0;
}

std::vector<float> histogram_256(const std::vector<float>& v, float& lo, float& hi) {
  lo = v.empty() ? 0.0f : v[0];
  hi = lo;
  for (float x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (hi <= lo) hi = lo + 1e-6f;
  std::vector<float> bins(256, 0.0f);
  for (float x : v) {
    int b = int((x - lo) / (hi - lo) * 256.0f);
    if (b < 0) b = 0;
    if (b > 255) b = 255;
    bins[std::size_t(b)] += 1.0f;
  }
  return bins;
}

int exactness_gate(int bits, msq::Rng& rng, bool inject_fault) {
  // trial shapes up to 512 in every dimension
  for (int trial = 0; trial < 12; ++trial) {
    const std::int64_t M = 1 + std::int64_t(rng.bounded(512));
    const std::int64_t K = 1 + std::int64_t(rng.bounded(512));
    const std::int64_t N = 1 + std::int64_t(rng.bounded(512));
    std::vector<int> wc(std::size_t(M * K)), ac(std::size_t(N * K));
    for (auto& c : wc)
      c = bits == 1 ? (rng.uniform() < 0.5 ? -1 : 1) : int(rng.bounded(3)) - 1;
    for (auto& c : ac) c = int(rng.bounded(std::uint64_t(1) << bits));
    auto w = msq::pack(wc, M, K, bits, msq::PackKind::weights);
    auto a = msq::pack(ac, N, K, bits, msq::PackKind::activations);
    auto acc = msq::packed_matmul_acc(w, a);
    if (inject_fault && trial == 3 && !acc.empty()) acc[0] += 1;
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t j = 0; j < N; ++j) {
        std::int64_t expect = 0;
        for (std::int64_t t = 0; t < K; ++t)
          expect += std::int64_t(wc[std::size_t(i * K + t)]) *
                    std::int64_t(ac[std::size_t(j * K + t)]);
        if (std::int64_t(acc[std::size_t(i * N + j)]) != expect) {
          std::cerr << "exactness violation at (" << i << "," << j
                    << ") shape " << M << "x" << K << "x" << N
                    << ": refusing to time a wrong kernel\n";
          return kExitExactness;
        }
      }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-precision quantized training with hot-swap bit-widths"};
  app.require_subcommand(1);

  DatasetOpts dopt;
  ArchOpts aopt;
  PlanOpts popt;
  std::string outdir = "runs/out";

  auto add_dataset_opts = [&](CLI::App* cmd) {
    cmd->add_option("--dataset.kind", dopt.kind, "mnist|cifar10|synthetic");
    cmd->add_option("--dataset.dir", dopt.dir, "dataset directory");
    cmd->add_option("--dataset.limit_train", dopt.limit_train);
    cmd->add_option("--dataset.limit_eval", dopt.limit_eval);
    cmd->add_option("--dataset.synthetic_n", dopt.synthetic_n);
    cmd->add_option("--dataset.synthetic_eval_n", dopt.synthetic_eval_n);
    cmd->add_option("--dataset.synthetic_hw", dopt.synthetic_hw);
    cmd->add_option("--dataset.synthetic_classes", dopt.synthetic_classes);
    cmd->add_option("--dataset.synthetic_seed", dopt.synthetic_seed);
    cmd->add_option("--dataset.augment", dopt.augment, "auto|on|off");
  };
  auto add_arch_opts = [&](CLI::App* cmd) {
    cmd->add_option("--arch.stem_channels", aopt.stem_channels);
    cmd->add_option("--arch.channels", aopt.channels)->delimiter(',');
    cmd->add_option("--arch.strides", aopt.strides)->delimiter(',');
    cmd->add_flag("--arch.per_k_act_quant,!--arch.no-per_k_act_quant",
                  aopt.per_k_act_quant);
    cmd->add_flag("--arch.per_k_bn,!--arch.no-per_k_bn", aopt.per_k_bn);
    cmd->add_flag("--arch.per_k_weight_quant,!--arch.no-per_k_weight_quant",
                  aopt.per_k_weight_quant);
    cmd->add_flag("--arch.subband_scales,!--arch.no-subband_scales",
                  aopt.subband_scales);
  };
  auto add_plan_opts = [&](CLI::App* cmd) {
    cmd->add_option("--plan.candidates", popt.candidates)->delimiter(',');
    cmd->add_option("--plan.probs", popt.probs)->delimiter(',');
    cmd->add_option("--plan.warmup_iters", popt.warmup_iters);
    cmd->add_option("--plan.epochs", popt.epochs);
    cmd->add_option("--plan.batch", popt.batch);
    cmd->add_option("--plan.lr", popt.lr);
    cmd->add_option("--plan.lr_decay_at", popt.lr_decay_at)->delimiter(',');
    cmd->add_option("--plan.lr_decay_factor", popt.lr_decay_factor);
    cmd->add_option("--plan.weight_decay", popt.weight_decay);
    cmd->add_option("--plan.momentum", popt.momentum);
    cmd->add_option("--plan.seed", popt.seed);
    cmd->add_option("--plan.mode", popt.mode, "sampled|joint");
    cmd->add_option("--plan.eval_subset", popt.eval_subset);
  };

  // ---- train ----
  auto* train = app.add_subcommand("train", "warmup + dynamic training");
  std::string config_path;
  train->add_option("--config", config_path, "config file ([section] key = value)");
  add_dataset_opts(train);
  add_arch_opts(train);
  add_plan_opts(train);
  train->add_option("--out.dir", outdir, "output directory");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "per-candidate accuracy sweep");
  std::string bundle_path, bits_arg = "all", eval_out = "";
  int force_bits = 0;
  eval->add_option("--bundle", bundle_path)->required();
  add_dataset_opts(eval);
  eval->add_option("--bits", bits_arg, "all or a single bit-width");
  eval->add_option("--force-bits", force_bits,
                   "evaluate at this bit-width reusing the nearest candidate's "
                   "hyper-parameters");
  eval->add_option("--out", eval_out, "CSV path (default <bundle dir>/eval.csv)");

  // ---- switch ----
  auto* sw = app.add_subcommand("switch", "hot-swap to a bit-width and infer");
  int sw_bits = 8;
  std::string sw_input, sw_export;
  std::int64_t sw_limit = 8;
  sw->add_option("--bundle", bundle_path)->required();
  sw->add_option("--bits", sw_bits)->required();
  sw->add_option("--input", sw_input, "IDX image file to run inference on");
  sw->add_option("--limit", sw_limit, "max inputs to run");
  sw->add_option("--export", sw_export, "write the materialized model here");

  // ---- report ----
  auto* report = app.add_subcommand("report", "subband and distribution reports");
  std::string report_kind = "subbands", report_out = "";
  bool nested = false;
  int report_bits = 0;  // 0 = full precision
  report->add_option("--bundle", bundle_path)->required();
  add_dataset_opts(report);
  report->add_option("--kind", report_kind, "subbands|distributions");
  report->add_flag("--nested", nested, "only the nested ll..full combinations");
  report->add_option("--bits", report_bits,
                     "quantize the masked forward at this bit-width (0 = full "
                     "precision)");
  report->add_option("--out", report_out, "CSV path");

  // ---- ablate ----
  auto* ablate = app.add_subcommand("ablate", "run an E1..E6 ablation variant");
  std::string exp_tag;
  ablate->add_option("--config", config_path, "config file ([section] key = value)");
  add_dataset_opts(ablate);
  add_arch_opts(ablate);
  add_plan_opts(ablate);
  ablate->add_option("--out.dir", outdir);
  ablate->add_option("--exp", exp_tag, "E1..E6")->required();

  // ---- bench ----
  auto* bench = app.add_subcommand("bench", "packed-kernel benchmarks");
  std::string kernel = "packed1", sizes_arg = "512x512x512", bench_out = "bench.csv";
  std::int64_t reps = 0;
  bool inject_fault = false;
  bench->add_option("--kernel", kernel, "packed1|packed2|float");
  bench->add_option("--sizes", sizes_arg, "comma list of MxKxN triples");
  bench->add_option("--reps", reps, "repetitions (0 = auto)");
  bench->add_option("--out", bench_out, "CSV path");
  bench->add_flag("--inject-exactness-fault", inject_fault)->group("");  // hidden

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config_args(args);
    std::reverse(args.begin(), args.end());  // CLI11 consumes reversed args
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const msq::FormatError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (app.got_subcommand(train)) {
      return run_training(dopt, aopt, popt, outdir);
    }

    if (app.got_subcommand(eval)) {
      msq::LoadedBundle bundle = [&] {
        try {
          return msq::load_bundle(bundle_path);
        } catch (const msq::Error& e) {
          std::cerr << "bad bundle: " << e.what() << "\n";
          std::exit(kExitBadBundle);
        }
      }();
      auto data = load_data(dopt);
      const auto& K = bundle.model.cfg.candidates;
      if (eval_out.empty())
        eval_out = (fs::path(bundle_path).parent_path() / "eval.csv").string();
      msq::CsvWriter csv(eval_out, "eval.v1",
                         {"bits", "theta_bits", "accuracy", "n"});
      auto run_one = [&](int bits, int theta_bits) {
        msq::ForwardSpec spec = msq::ForwardSpec::eval(theta_bits);
        spec.quant_bits = bits;
        const double acc =
            msq::evaluate(bundle.model, data.eval, spec, 256, 0);
        csv.row(bits, theta_bits, acc, data.eval.n);
        std::cout << "bits=" << bits << " (theta k=" << theta_bits
                  << ") accuracy=" << acc << "\n";
      };
      if (force_bits > 0) {
        run_one(force_bits, K.nearest(force_bits));
      } else if (bits_arg == "all") {
        for (int k : K.bits) run_one(k, k);
      } else {
        const int k = std::stoi(bits_arg);
        K.index_of(k);  // throws CandidateError -> exit 6
        run_one(k, k);
      }
      std::cout << "wrote " << eval_out << "\n";
      return 0;
    }

    if (app.got_subcommand(sw)) {
      const auto t0 = std::chrono::steady_clock::now();
      msq::LoadedBundle bundle = [&] {
        try {
          return msq::load_bundle(bundle_path);
        } catch (const msq::Error& e) {
          std::cerr << "bad bundle: " << e.what() << "\n";
          std::exit(kExitBadBundle);
        }
      }();
      const auto t1 = std::chrono::steady_clock::now();
      auto [mat, swap_seconds] = msq::hot_swap(bundle.model, sw_bits);
      std::cout << "load: "
                << std::chrono::duration<double, std::milli>(t1 - t0).count()
                << " ms\nswap: " << swap_seconds * 1e3 << " ms\n";

      if (!sw_export.empty()) {
        msq::export_quantized(mat, sw_export);
        std::cout << "exported materialized model to " << sw_export << "\n";
      }
      if (!sw_input.empty()) {
        auto ds = [&] {
          // IDX image file; labels are not needed for inference
          std::ifstream in(sw_input, std::ios::binary);
          if (!in) throw msq::DataError("cannot open " + sw_input);
          const auto magic = msq::detail::read_be32(in, "image magic");
          if (magic != 0x803)
            throw msq::FormatError(sw_input + ": not an IDX image file");
          const std::int64_t n = msq::detail::read_be32(in, "count");
          const std::int64_t rows = msq::detail::read_be32(in, "rows");
          const std::int64_t cols = msq::detail::read_be32(in, "cols");
          msq::Dataset d;
          d.n = std::min<std::int64_t>(n, sw_limit);
          d.c = 1;
          d.h = rows;
          d.w = cols;
          d.images.resize(std::size_t(d.n * rows * cols));
          if (!in.read(reinterpret_cast<char*>(d.images.data()),
                       std::streamsize(d.images.size())))
            throw msq::IntegrityError(sw_input + ": truncated");
          d.labels.assign(std::size_t(d.n), 0);
          d.mean = bundle.meta.at("normalize_mean").get<std::vector<float>>();
          d.stdev = bundle.meta.at("normalize_std").get<std::vector<float>>();
          return d;
        }();
        msq::BatchStream stream(ds, ds.n, 0, false, false);
        msq::Tensor x;
        std::vector<int> labels;
        stream.next(x, labels);
        auto logits = mat.eval(x);
        std::cout << "predictions:";
        const std::int64_t C = logits.dim(1);
        for (std::int64_t i = 0; i < logits.dim(0); ++i) {
          const float* row = logits.data().data() + i * C;
          std::int64_t best = 0;
          for (std::int64_t j = 1; j < C; ++j)
            if (row[j] > row[best]) best = j;
          std::cout << " " << best;
        }
        std::cout << "\n";
      }
      return 0;
    }

    if (app.got_subcommand(report)) {
      msq::LoadedBundle bundle = [&] {
        try {
          return msq::load_bundle(bundle_path);
        } catch (const msq::Error& e) {
          std::cerr << "bad bundle: " << e.what() << "\n";
          std::exit(kExitBadBundle);
        }
      }();
      auto& model = bundle.model;
      if (report_out.empty())
        report_out = (fs::path(bundle_path).parent_path() /
                      (report_kind + ".csv")).string();

      if (report_kind == "subbands") {
        auto data = load_data(dopt);
        msq::CsvWriter csv(report_out, "subbands.v1",
                           {"mask", "bits", "accuracy"});
        std::vector<std::array<bool, 4>> masks;
        if (nested) {
          masks = {{true, false, false, false},
                   {true, true, false, false},
                   {true, true, true, false},
                   {true, true, true, true}};
        } else {
          for (int m = 1; m < 16; ++m)
            masks.push_back({(m & 1) != 0, (m & 2) != 0, (m & 4) != 0,
                             (m & 8) != 0});
        }
        for (const auto& mask : masks) {
          msq::ForwardSpec spec =
              msq::ForwardSpec::eval(report_bits > 0
                                         ? report_bits
                                         : model.cfg.candidates.largest());
          spec.mask = mask;
          if (report_bits <= 0) spec.quantize = false;
          const double acc = msq::evaluate(model, data.eval, spec, 256, 0);
          std::string mask_str;
          for (bool b : mask) mask_str += b ? '1' : '0';
          csv.row(mask_str, report_bits > 0 ? std::to_string(report_bits) : "fp",
                  acc);
          std::cout << "mask " << mask_str << " accuracy " << acc << "\n";
        }
      } else if (report_kind == "distributions") {
        msq::CsvWriter csv(report_out, "distributions.v1",
                           {"tensor", "bin", "lo", "hi", "count"});
        msq::NoGradGuard ng;
        auto emit = [&](const std::string& name, const std::vector<float>& v) {
          float lo, hi;
          auto bins = histogram_256(v, lo, hi);
          const float width = (hi - lo) / 256.0f;
          for (int b = 0; b < 256; ++b)
            csv.row(name, b, lo + float(b) * width, lo + float(b + 1) * width,
                    bins[std::size_t(b)]);
        };
        for (std::size_t i = 0; i < model.blocks.size(); ++i) {
          const auto& blk = model.blocks[i];
          const std::string base = "block" + std::to_string(i);
          emit(base + ".W", blk.W.data());
          if (blk.multiscale) {
            auto bands = msq::dwt2(blk.W);
            emit(base + ".ll", bands.ll.data());
            emit(base + ".lh", bands.lh.data());
            emit(base + ".hl", bands.hl.data());
            emit(base + ".hh", bands.hh.data());
          }
          for (int k : model.cfg.candidates.bits) {
            auto what = blk.reconstruct(model.theta_index(k));
            emit(base + ".k" + std::to_string(k) + ".What", what.data());
          }
        }
      } else {
        throw msq::DomainError("report kind must be subbands or distributions");
      }
      std::cout << "wrote " << report_out << "\n";
      return 0;
    }

    if (app.got_subcommand(ablate)) {
      if (exp_tag.size() != 2 || exp_tag[0] != 'E' || exp_tag[1] < '1' ||
          exp_tag[1] > '6')
        throw msq::DomainError("unknown ablation tag " + exp_tag +
                               " (want E1..E6)");
      const int exp = exp_tag[1] - '0';
      ArchOpts a = aopt;
      PlanOpts p = popt;
      a.per_k_act_quant = exp >= 3;
      a.per_k_bn = exp >= 4;
      a.per_k_weight_quant = exp >= 5;
      a.subband_scales = exp >= 6;
      if (exp == 1) p.candidates = {8};  // fixed 8-bit training
      return run_training(dopt, a, p, outdir + "/" + exp_tag);
    }

    if (app.got_subcommand(bench)) {
      msq::Rng rng(20240901);
      fs::path outp(bench_out);
      if (outp.has_parent_path()) fs::create_directories(outp.parent_path());
      msq::CsvWriter csv(bench_out, "bench.v1",
                         {"kernel", "size", "reps", "ns_per_op", "gops"});

      std::vector<std::array<std::int64_t, 3>> sizes;
      for (const auto& tok : [&] {
             std::vector<std::string> parts;
             std::stringstream ss(sizes_arg);
             std::string item;
             while (std::getline(ss, item, ',')) parts.push_back(item);
             return parts;
           }()) {
        std::array<std::int64_t, 3> mkn{};
        if (std::sscanf(tok.c_str(), "%ldx%ldx%ld", &mkn[0], &mkn[1], &mkn[2]) != 3)
          throw msq::DomainError("bad size triple " + tok);
        sizes.push_back(mkn);
      }

      if (kernel == "packed1" || kernel == "packed2") {
        const int bits = kernel == "packed2" ? 2 : 1;
        const int gate = exactness_gate(bits, rng, inject_fault);
        if (gate != 0) return gate;
        for (auto [M, K, N] : sizes) {
          std::vector<int> wc(std::size_t(M * K)), ac(std::size_t(N * K));
          for (auto& c : wc)
            c = bits == 1 ? (rng.uniform() < 0.5 ? -1 : 1)
                          : int(rng.bounded(3)) - 1;
          for (auto& c : ac) c = int(rng.bounded(std::uint64_t(1) << bits));
          auto w = msq::pack(wc, M, K, bits, msq::PackKind::weights, 0.5f);
          auto aP = msq::pack(ac, N, K, bits, msq::PackKind::activations, 0.1f);
          std::int64_t r = reps;
          if (r == 0) r = std::max<std::int64_t>(1, (1ll << 28) / (M * K * N));
          const auto t0 = std::chrono::steady_clock::now();
          float sink = 0.0f;
          for (std::int64_t i = 0; i < r; ++i) {
            auto out = msq::packed_matmul(w, aP);
            sink += out.data()[0];
          }
          const auto t1 = std::chrono::steady_clock::now();
          const double sec = std::chrono::duration<double>(t1 - t0).count();
          const double ops = 2.0 * double(M) * double(K) * double(N) * double(r);
          csv.row(kernel, std::to_string(M) + "x" + std::to_string(K) + "x" +
                              std::to_string(N),
                  r, sec * 1e9 / double(r), ops / sec / 1e9);
          std::cout << kernel << " " << M << "x" << K << "x" << N << ": "
                    << ops / sec / 1e9 << " gops (sink " << sink << ")\n";
        }
      } else if (kernel == "float") {
        for (auto [M, K, N] : sizes) {
          msq::Rng lr(1);
          std::vector<float> adata(std::size_t(M * K)), bdata(std::size_t(K * N));
          for (auto& v : adata) v = lr.uniform_float() - 0.5f;
          for (auto& v : bdata) v = lr.uniform_float() - 0.5f;
          auto A = msq::Tensor::from_data({M, K}, std::move(adata));
          auto B = msq::Tensor::from_data({K, N}, std::move(bdata));
          std::int64_t r = reps;
          if (r == 0) r = std::max<std::int64_t>(1, (1ll << 28) / (M * K * N));
          const auto t0 = std::chrono::steady_clock::now();
          float sink = 0.0f;
          for (std::int64_t i = 0; i < r; ++i) {
            auto out = msq::matmul(A, B);
            sink += out.data()[0];
          }
          const auto t1 = std::chrono::steady_clock::now();
          const double sec = std::chrono::duration<double>(t1 - t0).count();
          const double ops = 2.0 * double(M) * double(K) * double(N) * double(r);
          csv.row("float", std::to_string(M) + "x" + std::to_string(K) + "x" +
                               std::to_string(N),
                  r, sec * 1e9 / double(r), ops / sec / 1e9);
          std::cout << "float " << M << "x" << K << "x" << N << ": "
                    << ops / sec / 1e9 << " gops (sink " << sink << ")\n";
        }
      } else {
        throw msq::DomainError("unknown kernel " + kernel);
      }
      return 0;
    }
  } catch (const msq::CandidateError& e) {
    std::cerr << "candidate error: " << e.what() << "\n";
    return kExitCandidate;
  } catch (const msq::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const msq::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const msq::IntegrityError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const msq::FormatError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const msq::DomainError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const msq::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
