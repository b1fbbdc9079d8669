#include "fedclust/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

namespace fedclust::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Section

Section::Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
  if (!j_.is_object())
    throw ConfigError(path_.empty() ? "/" : path_, "expected an object");
}

bool Section::has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

const json& Section::at(const std::string& key) {
  seen_.insert(key);
  if (!j_.contains(key))
    throw ConfigError(child_path(key), "missing required field");
  return j_.at(key);
}

double Section::number(const std::string& key) {
  const json& v = at(key);
  if (!v.is_number())
    throw ConfigError(child_path(key), "expected a number");
  return v.get<double>();
}

double Section::number_or(const std::string& key, double fallback) {
  seen_.insert(key);
  return has(key) ? number(key) : fallback;
}

int Section::integer(const std::string& key) {
  const json& v = at(key);
  if (!v.is_number_integer())
    throw ConfigError(child_path(key), "expected an integer");
  const auto x = v.get<std::int64_t>();
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
    throw ConfigError(child_path(key), "integer out of range");
  return static_cast<int>(x);
}

int Section::integer_or(const std::string& key, int fallback) {
  seen_.insert(key);
  return has(key) ? integer(key) : fallback;
}

std::uint64_t Section::seed(const std::string& key) {
  const json& v = at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw ConfigError(child_path(key), "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

std::uint64_t Section::seed_or(const std::string& key, std::uint64_t fallback) {
  seen_.insert(key);
  return has(key) ? seed(key) : fallback;
}

std::string Section::string(const std::string& key) {
  const json& v = at(key);
  if (!v.is_string())
    throw ConfigError(child_path(key), "expected a string");
  return v.get<std::string>();
}

std::string Section::string_or(const std::string& key, const std::string& fallback) {
  seen_.insert(key);
  return has(key) ? string(key) : fallback;
}

std::vector<int> Section::integers_or(const std::string& key, std::vector<int> fallback) {
  seen_.insert(key);
  if (!has(key))
    return fallback;
  const json& v = at(key);
  if (!v.is_array())
    throw ConfigError(child_path(key), "expected an array of integers");
  std::vector<int> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number_integer())
      throw ConfigError(child_path(key) + "/" + std::to_string(i), "expected an integer");
    out.push_back(v[i].get<int>());
  }
  return out;
}

std::vector<double> Section::numbers(const std::string& key) {
  const json& v = at(key);
  if (!v.is_array())
    throw ConfigError(child_path(key), "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number())
      throw ConfigError(child_path(key) + "/" + std::to_string(i), "expected a number");
    out.push_back(v[i].get<double>());
  }
  return out;
}

Section Section::object(const std::string& key) { return Section(at(key), child_path(key)); }

std::optional<Section> Section::object_opt(const std::string& key) {
  seen_.insert(key);
  if (!has(key))
    return std::nullopt;
  return object(key);
}

void Section::done() const {
  for (const auto& item : j_.items())
    if (!seen_.count(item.key()))
      throw ConfigError(child_path(item.key()), "unknown key");
}

// ---------------------------------------------------------------------------
// Parsing

json load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("/", "cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("/", "malformed JSON in " + path.string() + ": " + e.what());
  }
}

namespace {

// Runs a validate() and reports failures against the owning section.
template <typename F>
void validated(const std::string& path, F&& f) {
  try {
    f();
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
}

std::optional<fs::path> output_dir_of(Section& top) {
  if (!top.has("output_dir")) {
    top.skip("output_dir");
    return std::nullopt;
  }
  return fs::path(top.string("output_dir"));
}

fs::path resolve_out(const OutDir& override_dir, const std::optional<fs::path>& configured) {
  const auto dir = override_dir ? override_dir : configured;
  if (!dir)
    throw ConfigError("/output_dir", "missing required field (or pass --out)");
  fs::create_directories(*dir);
  return *dir;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f)
    throw Error("cannot write " + p.string());
  return f;
}

void write_json(const fs::path& p, const json& j) {
  auto f = open_out(p);
  f << j.dump(2) << '\n';
}

} // namespace

LabeledDataset load_dataset(Section ds) {
  const std::string source = ds.string("source");
  Section params = ds.object("params");
  ds.done();
  LabeledDataset out;
  if (source == "gmm") {
    const int k_star = params.integer("k_star");
    const int d = params.integer("d");
    const int n = params.integer("n_per_cluster");
    const double sep = params.number("separation");
    const auto seed = params.seed("seed");
    params.done();
    if (k_star < 1 || d < 1 || n < 1)
      throw ConfigError(params.path(), "k_star, d and n_per_cluster must be positive");
    out = synth_gmm(k_star, d, n, sep, seed);
  } else if (source == "idx") {
    const fs::path images = params.string("images");
    const fs::path labels = params.string("labels");
    const int limit = params.integer_or("limit", 0);
    params.done();
    out = load_idx(images, labels);
    if (limit > 0 && limit < out.size()) {
      out.X = out.X.leftCols(limit).eval();
      out.y.resize(static_cast<std::size_t>(limit));
    }
  } else {
    throw ConfigError(ds.child_path("source"), "expected \"gmm\" or \"idx\", got \"" + source + "\"");
  }
  return out;
}

TrainRun parse_train_run(const json& cfg, const std::set<std::string>& extra_keys) {
  Section top(cfg, "");
  TrainRun run;

  Section part = top.object("partition");
  run.partition.m = part.integer("m");
  run.partition.p = part.number("p");
  run.partition.s = part.integer("s");
  run.partition.seed = part.seed("seed");
  part.done();

  Section fed = top.object("federation");
  run.federation.rounds = fed.integer("rounds");
  run.federation.k = fed.integer("k");
  run.federation.seed = fed.seed_or("seed", 0);
  run.federation.workers = fed.integer_or("workers", 1);
  run.federation.probe_per_client = fed.integer_or("probe_per_client", 64);
  run.federation.kmeans.restarts = fed.integer_or("kmeans_restarts", 3);
  run.federation.tau0 = fed.number_or("tau0", 1e-3);
  if (auto failure = fed.object_opt("failure")) {
    run.federation.failure.disconnection_rate = failure->number("rate");
    run.federation.failure.seed = failure->seed_or("seed", 0);
    failure->done();
  }
  fed.done();

  Section train = top.object("train");
  run.federation.train.lambda = train.number("lambda");
  run.federation.train.eta_reg = train.number("eta_reg");
  run.federation.train.lr = train.number("lr");
  run.federation.train.local_epochs = train.integer("epochs");
  run.federation.train.batch_size = train.integer("batch");
  run.federation.train.seed = train.seed("seed");
  train.done();
  validated("/train", [&] { run.federation.train.validate(); });
  validated("/federation", [&] { run.federation.validate(); });
  if (run.federation.probe_per_client < 1)
    throw ConfigError("/federation/probe_per_client", "must be positive");
  if (run.federation.kmeans.restarts < 1)
    throw ConfigError("/federation/kmeans_restarts", "must be positive");

  ModelSpec spec;
  spec.encoder_hidden = {64};
  spec.d_latent = 16;
  spec.hidden_activation = Activation::Relu;
  if (auto model = top.object_opt("model")) {
    auto to_index = [](const std::vector<int>& v) { return std::vector<Eigen::Index>(v.begin(), v.end()); };
    spec.encoder_hidden = to_index(model->integers_or("encoder_hidden", {64}));
    spec.d_latent = model->integer_or("d_latent", 16);
    spec.predictor_hidden = to_index(model->integers_or("predictor_hidden", {}));
    try {
      spec.hidden_activation = activation_from_string(model->string_or("activation", "relu"));
    } catch (const InvalidArgument& e) {
      throw ConfigError(model->child_path("activation"), e.what());
    }
    run.model_seed = model->seed_or("seed", 0);
    model->done();
    for (auto h : spec.encoder_hidden)
      if (h < 1)
        throw ConfigError("/model/encoder_hidden", "layer widths must be positive");
    for (auto h : spec.predictor_hidden)
      if (h < 1)
        throw ConfigError("/model/predictor_hidden", "layer widths must be positive");
    if (spec.d_latent < 1)
      throw ConfigError("/model/d_latent", "must be positive");
  }

  run.output_dir = output_dir_of(top);
  for (const auto& key : extra_keys)
    top.skip(key);
  // Dataset last: loading may be expensive and all cheap checks should fire first.
  run.data = load_dataset(top.object("dataset"));
  top.done();

  validated("/partition", [&] {
    if (run.partition.m != run.data.k_star)
      throw InvalidArgument("m = " + std::to_string(run.partition.m) +
                            " must equal the number of classes " + std::to_string(run.data.k_star));
    if (!(run.partition.p >= 0.0 && run.partition.p <= 1.0))
      throw InvalidArgument("p must lie in [0, 1]");
    if (run.partition.s < 1)
      throw InvalidArgument("s must be positive");
  });
  spec.in_dim = run.data.d();
  run.model = spec;
  return run;
}

TheoryRun parse_theory_run(const json& cfg) {
  Section top(cfg, "");
  TheoryRun run;
  if (auto t = top.object_opt("theory")) {
    TheoryConfig& c = run.theory;
    c.d = t->integer_or("d", c.d);
    c.d_prime = t->integer_or("d_prime", c.d_prime);
    c.L1 = t->integer_or("L1", c.L1);
    c.L2 = t->integer_or("L2", c.L2);
    c.k = t->integer_or("k", c.k);
    c.n_c = t->integer_or("n_c", c.n_c);
    c.lambda = t->number_or("lambda", c.lambda);
    c.dt = t->number_or("dt", c.dt);
    c.steps = t->integer_or("steps", c.steps);
    c.imbalance = t->number_or("imbalance", c.imbalance);
    c.separation = t->number_or("separation", c.separation);
    c.noise = t->number_or("noise", c.noise);
    c.init_scale = t->number_or("init_scale", c.init_scale);
    c.seed = t->seed_or("seed", c.seed);
    try {
      c.gradient = gradient_model_from_string(t->string_or("gradient", "exact"));
    } catch (const InvalidArgument& e) {
      throw ConfigError(t->child_path("gradient"), e.what());
    }
    t->done();
  }
  validated("/theory", [&] { run.theory.validate(); });
  if (auto v = top.object_opt("verify")) {
    run.verify.top = v->integer_or("top", run.verify.top);
    run.verify.alignment_threshold = v->number_or("alignment_threshold", run.verify.alignment_threshold);
    v->done();
    if (run.verify.top < 1)
      throw ConfigError("/verify/top", "must be positive");
  }
  run.output_dir = output_dir_of(top);
  top.done();
  return run;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

json shard_summary(const LabeledDataset& ds, const ClientShard& s) {
  const int dominant = s.client_id % ds.k_star;
  return {{"client_id", s.client_id},
          {"size", s.indices.size()},
          {"p", s.p_used},
          {"seed", s.seed},
          {"dominant_class", dominant},
          {"purity", label_fraction(ds, s, dominant)}};
}

struct TrainOutcome {
  std::vector<ClientShard> shards;
  FederationResult result;
};

TrainOutcome execute(const TrainRun& run) {
  TrainOutcome o;
  o.shards = partition_heterogeneous(run.data, run.partition);
  const auto model = make_model(run.model, run.model_seed);
  o.result = run_federation(run.data, o.shards, model, run.federation);
  return o;
}

} // namespace

void cmd_partition(const json& cfg, const OutDir& out, std::ostream& log) {
  Section top(cfg, "");
  PartitionSpec spec;
  Section part = top.object("partition");
  spec.m = part.integer("m");
  spec.p = part.number("p");
  spec.s = part.integer("s");
  spec.seed = part.seed("seed");
  part.done();
  const auto configured = output_dir_of(top);
  const auto data = load_dataset(top.object("dataset"));
  top.done();
  validated("/partition", [&] {
    if (spec.m != data.k_star)
      throw InvalidArgument("m must equal the number of classes " + std::to_string(data.k_star));
    if (!(spec.p >= 0.0 && spec.p <= 1.0))
      throw InvalidArgument("p must lie in [0, 1]");
    if (spec.s < 1)
      throw InvalidArgument("s must be positive");
  });
  const fs::path dir = resolve_out(out, configured);

  const auto shards = partition_heterogeneous(data, spec);
  auto csv = open_out(dir / "purity.csv");
  csv << "client_id,size,dominant_class,purity\n";
  json summary = json::array();
  for (const auto& s : shards) {
    write_json(dir / ("shard_" + std::to_string(s.client_id) + ".json"), shard_to_json(s));
    const auto row = shard_summary(data, s);
    csv << s.client_id << ',' << s.indices.size() << ',' << row["dominant_class"].get<int>() << ','
        << format_real(row["purity"].get<double>()) << '\n';
    summary.push_back(row);
  }
  write_json(dir / "partition.json", {{"command", "partition"}, {"config", cfg}, {"shards", summary}});
  log << "partition: " << shards.size() << " shards written to " << dir.string() << '\n';
}

void cmd_train(const json& cfg, const OutDir& out, std::ostream& log) {
  const TrainRun run = parse_train_run(cfg);
  const fs::path dir = resolve_out(out, run.output_dir);
  const auto o = execute(run);

  {
    auto f = open_out(dir / "history.csv");
    write_history_csv(f, o.result.history);
  }
  {
    auto f = open_out(dir / "labels.csv");
    write_labels_csv(f, o.result.final_labels);
  }
  write_json(dir / "model.json", model_to_json(o.result.final_state.global_model));

  json shards = json::array();
  for (const auto& s : o.shards)
    shards.push_back(shard_summary(run.data, s));
  const auto& last = o.result.history.back();
  json manifest = {{"command", "train"},
                   {"config", cfg},
                   {"method", run.federation.train.eta_reg > 0 ? "CCFC++" : "CCFC"},
                   {"dataset", {{"n", run.data.size()}, {"d", run.data.d()}, {"k_star", run.data.k_star}}},
                   {"shards", shards},
                   {"survivors", o.result.survivors},
                   {"rounds", o.result.history.size()},
                   {"final",
                    {{"nmi", last.nmi},
                     {"kappa", last.kappa},
                     {"effective_rank", last.effective_rank},
                     {"mean_abs_offdiag_corr", last.mean_abs_offdiag_corr},
                     {"near_zero_count", last.near_zero_count},
                     {"loss_mean", last.loss_mean}}},
                   {"files", {"history.csv", "labels.csv", "model.json"}}};
  write_json(dir / "manifest.json", manifest);
  log << "train: " << o.result.history.size() << " rounds, final nmi " << format_real(last.nmi)
      << ", kappa " << format_real(last.kappa) << ", mean |offdiag corr| "
      << format_real(last.mean_abs_offdiag_corr) << '\n';
}

void cmd_theory(const json& cfg, const OutDir& out, std::ostream& log) {
  const TheoryRun run = parse_theory_run(cfg);
  const fs::path dir = resolve_out(out, run.output_dir);
  const ProbeLog probe = run_probe(run.theory);
  {
    auto f = open_out(dir / "probe.csv");
    write_probe_csv(f, probe);
  }
  const auto report = verify_sigma_dynamics(probe, run.verify);
  json summary = {{"command", "theory"},
                  {"config", cfg},
                  {"steps", probe.steps},
                  {"records", probe.records.size()},
                  {"C0", probe.C0},
                  {"halted", probe.halted},
                  {"halt_reason", probe.halt_reason},
                  {"sigma_dynamics", to_json(report)},
                  {"assumptions", probe.records.empty() ? json(nullptr) : to_json(check_assumptions(probe))}};
  write_json(dir / "assumptions.json", summary);
  log << "theory: " << probe.records.size() << " records";
  if (report.literal_all.count > 0)
    log << ", median relative residual " << format_real(report.literal_all.median) << " (closed-form Q), "
        << format_real(report.exact_all.median) << " (exact-gradient Q)";
  if (report.assumption_broken)
    log << ", alignment assumption broken (max deviation " << format_real(report.max_alignment_dev) << ")";
  if (probe.halted)
    log << ", halted: " << probe.halt_reason;
  log << '\n';
}

void cmd_diagnose(const json& cfg, const OutDir& out, std::ostream& log) {
  Section top(cfg, "");
  const fs::path model_path = top.string("model_path");
  const double tau0 = top.number_or("tau0", 1e-3);
  const auto configured = output_dir_of(top);
  Section ds = top.object("dataset");
  if (!(tau0 > 0.0 && tau0 < 1.0))
    throw ConfigError("/tau0", "must lie in (0, 1)");

  std::ifstream in(model_path);
  if (!in)
    throw Error("cannot open model file " + model_path.string());
  json mj;
  try {
    mj = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("malformed model file " + model_path.string() + ": " + e.what());
  }
  const auto model = model_from_json(mj);
  const auto data = load_dataset(ds);
  top.done();
  const fs::path dir = resolve_out(out, configured);

  const auto report = collapse_report(model.encoder.forward(data.X), tau0);
  write_json(dir / "collapse.json", to_json(report));
  auto f = open_out(dir / "spectrum.csv");
  write_spectrum_csv(f, report);
  log << "diagnose: effective rank " << format_real(report.effective_rank) << ", near-zero "
      << report.near_zero_count << " of " << report.singular_values.size() << '\n';
}

void cmd_failures(const json& cfg, const OutDir& out, std::ostream& log) {
  const TrainRun run = parse_train_run(cfg, {"rates"});
  Section top(cfg, "");
  const auto rates = top.numbers("rates");
  if (rates.empty())
    throw ConfigError("/rates", "need at least one rate");
  for (std::size_t i = 0; i < rates.size(); ++i)
    if (!(rates[i] >= 0.0 && rates[i] < 1.0))
      throw ConfigError("/rates/" + std::to_string(i), "disconnection rate must lie in [0, 1)");
  const fs::path dir = resolve_out(out, run.output_dir);

  const auto shards = partition_heterogeneous(run.data, run.partition);
  const auto model = make_model(run.model, run.model_seed);
  auto csv = open_out(dir / "sweep.csv");
  csv << "rate,survivors,nmi,kappa,effective_rank,mean_abs_offdiag_corr,near_zero_count,loss_mean\n";
  for (double rate : rates) {
    FederationConfig fed = run.federation;
    fed.failure.disconnection_rate = rate;
    const auto result = run_federation(run.data, shards, model, fed);
    const auto& last = result.history.back();
    csv << format_real(rate) << ',' << result.survivors.size() << ',' << format_real(last.nmi) << ','
        << format_real(last.kappa) << ',' << format_real(last.effective_rank) << ','
        << format_real(last.mean_abs_offdiag_corr) << ',' << last.near_zero_count << ','
        << format_real(last.loss_mean) << '\n';
    log << "failures: rate " << format_real(rate) << ", " << result.survivors.size()
        << " clients, final nmi " << format_real(last.nmi) << '\n';
  }
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated cluster-contrastive clustering experiments"};
  app.require_subcommand(1);
  std::string config;
  std::string out_dir;
  struct Cmd {
    const char* name;
    const char* help;
    void (*fn)(const json&, const OutDir&, std::ostream&);
  };
  const Cmd cmds[] = {{"partition", "write client shard manifests", cmd_partition},
                      {"train", "run federated training", cmd_train},
                      {"theory", "run the linear gradient-flow probe", cmd_theory},
                      {"diagnose", "collapse diagnostics of a saved model", cmd_diagnose},
                      {"failures", "sweep client disconnection rates", cmd_failures}};
  std::vector<CLI::App*> subs;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config, "JSON configuration file")->required();
    sub->add_option("--out", out_dir, "output directory (overrides output_dir)");
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "fedclust: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    const json cfg = load_config(config);
    const OutDir dir = out_dir.empty() ? OutDir{} : OutDir{fs::path(out_dir)};
    for (std::size_t i = 0; i < subs.size(); ++i)
      if (subs[i]->parsed())
        cmds[i].fn(cfg, dir, out);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "fedclust: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "fedclust: " << e.what() << '\n';
    return kExitRuntime;
  }
}

} // namespace fedclust::cli
