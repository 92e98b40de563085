// SPDX-License-Identifier: Apache-2.0
// smoe: profile block sensitivities, allocate LoRA experts, train and evaluate
// adapters on the synthetic task suite.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "smoe/adapter.hpp"
#include "smoe/allocator.hpp"
#include "smoe/checkpoint.hpp"
#include "smoe/errors.hpp"
#include "smoe/hash.hpp"
#include "smoe/sensitivity.hpp"
#include "smoe/tasks.hpp"
#include "smoe/train.hpp"

namespace {

using namespace smoe;

constexpr int kExitContract = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

// SMOE_SEED replaces every seed given on the command line.
std::optional<std::uint64_t> env_seed() {
  const char* text = std::getenv("SMOE_SEED");
  if (text == nullptr || *text == '\0') return std::nullopt;
  try {
    return parse_count(text, "SMOE_SEED");
  } catch (const ParseError& e) {
    throw ContractError(e.what());
  }
}

std::uint64_t seed_or_env(std::uint64_t flag) { return env_seed().value_or(flag); }

struct DataFlags {
  std::uint64_t seed = 0;
  std::size_t train_items = 1024;
  std::size_t test_items = 128;
  std::size_t input_len = 0;

  void add_to(CLI::App* app) {
    app->add_option("--data-seed", seed, "Task generator seed")->capture_default_str();
    app->add_option("--train-items", train_items, "Training items per task")->capture_default_str();
    app->add_option("--test-items", test_items, "Test items per task")->capture_default_str();
    app->add_option("--input-len", input_len, "Symbols per task input (0: fit the sequence length)")
        ->capture_default_str();
  }

  std::vector<TaskDataset> generate(const ModelConfig& config, std::span<const TaskKind> tasks,
                                    std::size_t min_train = 0) const {
    TaskOptions options;
    options.input_len = input_len;
    return generate_tasks(config.vocab_size, config.max_seq_len, std::max(train_items, min_train), test_items,
                          seed_or_env(seed), tasks, options);
  }
};

std::vector<TaskKind> parse_tasks(const std::vector<std::string>& names) {
  std::vector<TaskKind> out;
  for (const std::string& name : names) {
    const auto task = parse_task(name);
    if (!task) throw ContractError("unknown task '" + name + "' (copy, reverse, mod-sum, parity)");
    out.push_back(*task);
  }
  if (out.empty()) throw ContractError("no tasks given");
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

std::string accuracy_lines(const std::string& label, const std::vector<TaskDataset>& data,
                           std::span<const TaskKind> tasks, const std::function<EvalResult(const TaskDataset&)>& eval,
                           std::vector<std::pair<std::string, double>>* record = nullptr) {
  std::ostringstream out;
  char buf[160];
  for (TaskKind task : tasks) {
    const EvalResult r = eval(find_dataset(data, task, Split::kTest));
    std::snprintf(buf, sizeof buf, "%s %-8s exact_match %.4f  token_accuracy %.4f  (%zu items)\n", label.c_str(),
                  std::string(to_string(task)).c_str(), r.exact_match, r.token_accuracy, r.items);
    out << buf;
    if (record) record->emplace_back(std::string(to_string(task)), r.exact_match);
  }
  return out.str();
}

struct InitCommand {
  ModelConfig config;
  std::string out;
  std::size_t pretrain_steps = 0;
  std::vector<std::string> pretrain_tasks = {"mod-sum", "parity"};
  double pretrain_lr = 3e-3;
  DataFlags data;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("init", "Create a base model checkpoint, optionally pretrained");
    cmd->add_option("--out", out, "Checkpoint path")->required();
    cmd->add_option("--layers", config.n_layers, "Decoder layers")->capture_default_str();
    cmd->add_option("--d-model", config.d_model, "Model width")->capture_default_str();
    cmd->add_option("--heads", config.n_heads, "Attention heads")->capture_default_str();
    cmd->add_option("--d-ff", config.d_ff, "MLP hidden width")->capture_default_str();
    cmd->add_option("--vocab", config.vocab_size, "Vocabulary size")->capture_default_str();
    cmd->add_option("--seq-len", config.max_seq_len, "Maximum sequence length")->capture_default_str();
    cmd->add_option("--seed", config.seed, "Initialization seed")->capture_default_str();
    cmd->add_option("--pretrain-steps", pretrain_steps, "Full-parameter training steps before saving")
        ->capture_default_str();
    cmd->add_option("--pretrain-tasks", pretrain_tasks, "Tasks used for pretraining")->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--pretrain-lr", pretrain_lr, "Pretraining peak learning rate")->capture_default_str();
    data.add_to(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    config.seed = seed_or_env(config.seed);
    BaseModel model = init_model(config);
    if (pretrain_steps > 0) {
      const auto tasks = parse_tasks(pretrain_tasks);
      const auto all = data.generate(config, tasks);
      std::vector<TaskDataset> train_sets;
      for (TaskKind t : tasks) train_sets.push_back(find_dataset(all, t, Split::kTrain));
      TrainConfig tc;
      tc.learning_rate = pretrain_lr;
      tc.lr_floor = pretrain_lr / 10.0;
      tc.steps = pretrain_steps;
      tc.cutoff_len = config.max_seq_len;
      tc.seed = config.seed;
      const auto samples = mixture(train_sets, tc.seed);
      const MetricsReport r = pretrain(model, samples, tc);
      std::printf("pretrained %zu steps: loss %.4f -> %.4f\n", pretrain_steps, r.loss_history.front(),
                  r.loss_history.back());
    }
    save_model(out, model);
    std::printf("wrote %s (%s, %zu parameters, config %s)\n", out.c_str(), config.describe().c_str(),
                model.parameter_count(), hex64(config.hash()).c_str());
  }
};

struct ProfileCommand {
  std::string model_path, task = "copy", out, heatmap;
  std::size_t samples = 0;
  std::string group_mode = "per-layer", schedule = "round-robin", aggregate = "sum";
  double loss_scale = 1.0;
  bool parallel = false;
  DataFlags data;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("profile", "Accumulate squared gradients per parameter block");
    cmd->add_option("--model", model_path, "Base model checkpoint")->required();
    cmd->add_option("--task", task, "Task whose training split is sampled")->capture_default_str();
    cmd->add_option("--out", out, "Profile path")->required();
    cmd->add_option("--samples", samples, "Sample count C (default 3 x number of groups)");
    cmd->add_option("--group-mode", group_mode, "Parameter grouping")
        ->check(CLI::IsMember({"per-layer", "single-group"}))
        ->capture_default_str();
    cmd->add_option("--schedule", schedule, "Which groups each sample updates")
        ->check(CLI::IsMember({"round-robin", "exhaustive"}))
        ->capture_default_str();
    cmd->add_option("--aggregate", aggregate, "Per-block reduction")
        ->check(CLI::IsMember({"sum", "mean"}))
        ->capture_default_str();
    cmd->add_option("--loss-scale", loss_scale, "Multiply the loss before differentiation")->capture_default_str();
    cmd->add_flag("--parallel", parallel, "Run samples concurrently (pairwise-summed, deterministic)");
    cmd->add_option("--heatmap", heatmap, "Also write the layer x kind heatmap CSV here");
    data.add_to(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    const BaseModel model = load_model(model_path);
    const auto task_kind = parse_tasks({task}).front();
    const ScheduleMode mode = *parse_schedule_mode(schedule);
    const GroupSchedule groups = *parse_group_mode(group_mode) == GroupMode::kPerLayer
                                     ? GroupSchedule::per_layer(model.config, mode)
                                     : GroupSchedule::single_group(model.config, mode);
    const std::size_t count = samples ? samples : 3 * groups.group_count();
    const TaskKind tasks[] = {task_kind};
    const auto all = data.generate(model.config, tasks, count);
    const auto pool = make_samples(find_dataset(all, task_kind, Split::kTrain));
    const std::span<const Sample> chosen(pool.data(), count);

    ProfileOptions opts;
    opts.task_id = task;
    opts.aggregate = *parse_aggregate(aggregate);
    opts.loss_scale = loss_scale;
    opts.parallel = parallel;
    const SensitivityProfile profile = profile_sensitivity(model, chosen, groups, opts);
    save_profile(out, profile);
    if (!heatmap.empty()) {
      std::ostringstream csv;
      write_heatmap_csv(csv, profile);
      write_text(heatmap, csv.str());
    }
    std::printf("profiled %zu samples of %s over %zu groups; wrote %s (hash %s)\n", count, task.c_str(),
                groups.group_count(), out.c_str(), hex64(profile.hash()).c_str());
  }
};

struct AllocateCommand {
  std::string profile_path, model_path, out, strategy = "separate";
  double budget = 0.6;
  std::size_t experts = kDefaultExperts, rank = kDefaultRank, layers = 0;
  std::vector<std::size_t> tiers = kDefaultMolaTiers;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("allocate", "Turn a sensitivity profile into an expert allocation plan");
    cmd->add_option("--profile", profile_path, "Sensitivity profile (required except for baselines)");
    cmd->add_option("--model", model_path, "Checks the profile was taken on this model; sizes baselines");
    cmd->add_option("--layers", layers, "Layer count for baselines when neither profile nor model is given");
    cmd->add_option("--out", out, "Plan path")->required();
    cmd->add_option("--strategy", strategy, "Allocation strategy")
        ->check(CLI::IsMember({"unified", "separate", "independent", "hydralora", "mola", "mola-tiered"}))
        ->capture_default_str();
    cmd->add_option("--budget", budget, "Fraction rho of blocks per pool that get experts, in (0, 1]")
        ->capture_default_str();
    cmd->add_option("--experts", experts, "Experts per selected block")->capture_default_str();
    cmd->add_option("--tiers", tiers, "MoLA expert counts per layer band, top band first")->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--rank", rank, "LoRA rank recorded in the plan")->capture_default_str();
    cmd->callback([this] { run(); });
  }

  void run() {
    const Strategy s = *parse_strategy(strategy);
    std::optional<BaseModel> model;
    if (!model_path.empty()) model = load_model(model_path);
    AllocationPlan plan;
    if (s == Strategy::kHydraLora || s == Strategy::kMolaTiered) {
      ModelConfig shape;
      if (model) shape = model->config;
      else if (!profile_path.empty()) shape.n_layers = load_profile(profile_path).n_layers;
      else if (layers > 0) shape.n_layers = layers;
      else throw ContractError("baselines need --model, --profile or --layers to know the layer count");
      plan = s == Strategy::kHydraLora ? baseline_hydralora(shape, experts) : baseline_mola_tiered(shape, tiers);
    } else {
      if (profile_path.empty()) throw ContractError("strategy " + strategy + " needs --profile");
      const SensitivityProfile profile =
          load_profile(profile_path, model ? std::optional(model->config.hash()) : std::nullopt);
      plan = allocate(profile, s, budget, experts);
    }
    plan.rank = rank;
    save_plan(out, plan);
    std::printf("%s plan: %zu of %zu blocks adapted; wrote %s\n", std::string(to_string(plan.strategy)).c_str(),
                selected_set(plan).size(), plan.block_count(), out.c_str());
  }
};

struct TrainCommand {
  std::string model_path, plan_path, out, metrics, summary;
  std::vector<std::string> tasks = {"copy", "reverse"};
  TrainConfig config;
  std::optional<std::size_t> rank;
  double scale = 1.0;
  std::size_t log_every = 0;
  DataFlags data;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("train", "Attach adapters from a plan and fine-tune them");
    cmd->add_option("--model", model_path, "Base model checkpoint")->required();
    cmd->add_option("--plan", plan_path, "Allocation plan")->required();
    cmd->add_option("--out", out, "Adapter checkpoint path")->required();
    cmd->add_option("--metrics", metrics, "Per-step CSV (step,lr,loss)");
    cmd->add_option("--summary", summary, "Summary text block (default: stdout)");
    cmd->add_option("--tasks", tasks, "Training mixture")->delimiter(',')->capture_default_str();
    cmd->add_option("--steps", config.steps, "Optimizer steps")->capture_default_str();
    cmd->add_option("--lr", config.learning_rate, "Peak learning rate")->capture_default_str();
    cmd->add_option("--lr-floor", config.lr_floor, "Cosine schedule floor")->capture_default_str();
    cmd->add_option("--batch", config.batch_size, "Sequences per step")->capture_default_str();
    cmd->add_option("--cutoff", config.cutoff_len, "Truncate sequences to this many tokens")->capture_default_str();
    cmd->add_option("--weight-decay", config.weight_decay, "AdamW decoupled weight decay")->capture_default_str();
    cmd->add_option("--seed", config.seed, "Batch order seed")->capture_default_str();
    cmd->add_option("--rank", rank, "LoRA rank (default: the plan's rank)");
    cmd->add_option("--scale", scale, "Adapter output scale")->capture_default_str();
    cmd->add_option("--log-every", log_every, "Print the loss every N steps to stderr (0: never)");
    data.add_to(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    auto base = std::make_shared<const BaseModel>(load_model(model_path));
    const AllocationPlan plan = load_plan(plan_path);
    config.seed = seed_or_env(config.seed);
    config.rank = rank.value_or(plan.rank);
    const auto kinds = parse_tasks(tasks);
    const auto all = data.generate(base->config, kinds);
    std::vector<TaskDataset> train_sets;
    for (TaskKind t : kinds) train_sets.push_back(find_dataset(all, t, Split::kTrain));
    const auto samples = mixture(train_sets, config.seed);

    AdaptedModel adapted = attach_adapters(base, plan, config.rank, scale);
    MetricsReport report = train(adapted, samples, config, [this](std::size_t step, double loss) {
      if (log_every && (step + 1) % log_every == 0) std::fprintf(stderr, "step %zu loss %.6f\n", step + 1, loss);
    });
    save_adapters(out, adapted);
    if (!metrics.empty()) {
      std::ostringstream csv;
      write_metrics_csv(csv, report);
      write_text(metrics, csv.str());
    }

    std::ostringstream text;
    char buf[200];
    const ParameterAccounting acc = trainable_fraction(plan, base->config, config.rank);
    std::snprintf(buf, sizeof buf, "plan %s  budget %g  adapted blocks %zu/%zu\n",
                  std::string(to_string(plan.strategy)).c_str(), plan.budget, selected_set(plan).size(),
                  plan.block_count());
    text << buf;
    std::snprintf(buf, sizeof buf, "tuned/total %.6f (%zu / %zu)\n", acc.fraction, acc.adapter_parameters,
                  acc.base_parameters);
    text << buf;
    if (!report.loss_history.empty()) {
      std::snprintf(buf, sizeof buf, "steps %zu  loss %.6f -> %.6f\n", report.loss_history.size(),
                    report.loss_history.front(), report.loss_history.back());
      text << buf;
    }
    text << accuracy_lines("base   ", all, kinds, [&](const TaskDataset& d) { return evaluate(*base, d); });
    text << accuracy_lines("adapted", all, kinds, [&](const TaskDataset& d) { return evaluate(adapted, d); },
                           &report.test_accuracy);
    std::snprintf(buf, sizeof buf, "wall_seconds %.2f\n", report.wall_seconds);
    text << buf;
    write_text(summary, text.str());
  }
};

struct EvalCommand {
  std::string model_path, adapters_path;
  std::vector<std::string> tasks = {"copy", "reverse", "mod-sum", "parity"};
  DataFlags data;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("eval", "Exact-match accuracy on the test splits");
    cmd->add_option("--model", model_path, "Base model checkpoint")->required();
    cmd->add_option("--adapters", adapters_path, "Adapter checkpoint (omit to evaluate the base model)");
    cmd->add_option("--tasks", tasks, "Tasks to evaluate")->delimiter(',')->capture_default_str();
    data.add_to(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    auto base = std::make_shared<const BaseModel>(load_model(model_path));
    const auto kinds = parse_tasks(tasks);
    const auto all = data.generate(base->config, kinds);
    if (adapters_path.empty()) {
      std::cout << accuracy_lines("base", all, kinds, [&](const TaskDataset& d) { return evaluate(*base, d); });
    } else {
      const AdaptedModel adapted = load_adapters(adapters_path, base);
      std::cout << accuracy_lines("adapted", all, kinds,
                                  [&](const TaskDataset& d) { return evaluate(adapted, d); });
    }
  }
};

struct ConsistencyCommand {
  std::string a, b;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("consistency", "Percentage of blocks on which two plans agree");
    cmd->add_option("plan_a", a, "First plan")->required();
    cmd->add_option("plan_b", b, "Second plan")->required();
    cmd->callback([this] { run(); });
  }

  void run() {
    const AllocationPlan pa = load_plan(a);
    const AllocationPlan pb = load_plan(b);
    if (pa.n_layers != pb.n_layers) {
      throw ContractError("plans cover different models (" + std::to_string(pa.n_layers) + " vs " +
                          std::to_string(pb.n_layers) + " layers)");
    }
    std::printf("%s\n", format_percent(selection_consistency(selected_set(pa), selected_set(pb),
                                                             all_blocks(pa.n_layers)))
                            .c_str());
  }
};

struct HeatmapCommand {
  std::string profile_path, out;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("report-heatmap", "Export a profile as a layer x kind CSV");
    cmd->add_option("--profile", profile_path, "Sensitivity profile")->required();
    cmd->add_option("--out", out, "CSV path (default: stdout)");
    cmd->callback([this] { run(); });
  }

  void run() {
    std::ostringstream csv;
    write_heatmap_csv(csv, load_profile(profile_path));
    write_text(out, csv.str());
  }
};

struct AccountCommand {
  std::string plan_path, model_path;
  std::optional<std::size_t> rank;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("account", "Trainable-parameter fraction (Tuned/Total) of a plan");
    cmd->add_option("--plan", plan_path, "Allocation plan")->required();
    cmd->add_option("--model", model_path, "Base model checkpoint")->required();
    cmd->add_option("--rank", rank, "LoRA rank (default: the plan's rank)");
    cmd->callback([this] { run(); });
  }

  void run() {
    const AllocationPlan plan = load_plan(plan_path);
    const BaseModel model = load_model(model_path);
    const ParameterAccounting acc = trainable_fraction(plan, model.config, rank.value_or(plan.rank));
    std::printf("adapter_parameters %zu\nbase_parameters %zu\ntuned_total %.6f\ntuned_total_percent %.4f%%\n",
                acc.adapter_parameters, acc.base_parameters, acc.fraction, 100.0 * acc.fraction);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sensitivity-driven LoRA expert allocation on a toy transformer"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 success, 2 usage or contract error, 3 I/O or file format error, 4 numeric failure.\n"
             "SMOE_SEED, when set, replaces every seed flag.");

  InitCommand init;
  ProfileCommand profile;
  AllocateCommand allocate_cmd;
  TrainCommand train_cmd;
  EvalCommand eval;
  ConsistencyCommand consistency;
  HeatmapCommand heatmap;
  AccountCommand account;
  init.add(app);
  profile.add(app);
  allocate_cmd.add(app);
  train_cmd.add(app);
  eval.add(app);
  consistency.add(app);
  heatmap.add(app);
  account.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitContract;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitContract;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  }
  return 0;
}
