#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "puredesk/checkpoint.hpp"
#include "puredesk/config.hpp"
#include "puredesk/csv.hpp"
#include "puredesk/dataset.hpp"
#include "puredesk/metrics.hpp"
#include "puredesk/ppm.hpp"

namespace puredesk {

// Pipeline stages behind the CLI subcommands. Every stage writes its
// artifacts under cfg.out_dir with fixed names and returns the key=value
// pairs for the machine-parseable summary line. Given the same config and
// root seed, reruns reproduce every artifact byte for byte.

using Summary = std::vector<std::pair<std::string, std::string>>;

inline std::string format_summary(const std::string& cmd, const Summary& kv) {
  std::string line = "cmd=" + cmd;
  for (const auto& [k, v] : kv) line += " " + k + "=" + v;
  return line;
}

namespace detail {

inline std::string out_path(const RunConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

inline void prepare_out_dir(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  set_worker_threads(cfg.threads);
  std::ofstream f(out_path(cfg, "effective_config.txt"), std::ios::binary | std::ios::trunc);
  f << cfg.echo();
}

inline DenoiserDescriptor descriptor_from(const RunConfig& cfg) {
  DenoiserDescriptor d;
  d.image_size = cfg.image_size;
  d.channels = cfg.channels;
  d.widths = cfg.widths;
  d.embed_dim = cfg.embed_dim;
  d.max_timestep = cfg.T;
  d.validate();
  return d;
}

inline NoiseSchedule schedule_from(const RunConfig& cfg) {
  return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
}

inline ImageDataset dataset_from(const RunConfig& cfg) {
  if (!cfg.data_path.empty()) return load_image_records(cfg.data_path, cfg.image_size);
  return gen_shapes_dataset(cfg.data_count, cfg.image_size, mix64(cfg.seed ^ fnv1a64("data", 4)));
}

inline ad::Tensor resolve_trigger(const RunConfig& cfg) {
  if (cfg.attack_trigger == "default")
    return make_corner_trigger(cfg.image_size, cfg.attack_trigger_patch, cfg.attack_trigger_value);
  return import_image_ppm(cfg.attack_trigger);
}

inline ad::Tensor resolve_target(const RunConfig& cfg) {
  if (cfg.attack_target == "default") return default_target_image(cfg.image_size);
  return import_image_ppm(cfg.attack_target);
}

inline ad::Tensor resolve_surrogate(const RunConfig& cfg) {
  const std::uint64_t seed = mix64(cfg.seed ^ fnv1a64("surrogate", 9));
  if (cfg.lambda_surrogate == "patch") return surrogate_patch_trigger(cfg.image_size, seed);
  if (cfg.lambda_surrogate == "cross") return surrogate_cross_trigger(cfg.image_size, seed);
  return import_image_ppm(cfg.lambda_surrogate);
}

inline NoiseSchedule schedule_from_checkpoint(const LoadedCheckpoint& ck) {
  auto at = [&](const std::string& k) {
    auto it = ck.metadata.find(k);
    if (it == ck.metadata.end())
      throw std::runtime_error("checkpoint metadata missing " + k);
    return it->second;
  };
  return make_schedule(std::stoi(at("schedule.T")), std::stod(at("schedule.beta_start")),
                       std::stod(at("schedule.beta_end")));
}

inline std::map<std::string, std::string> run_metadata(const RunConfig& cfg,
                                                       const std::string& provenance) {
  return {
      {"schedule.T", std::to_string(cfg.T)},
      {"schedule.beta_start", format_double(cfg.beta_start)},
      {"schedule.beta_end", format_double(cfg.beta_end)},
      {"provenance", provenance},
      {"seed", std::to_string(cfg.seed)},
  };
}

inline LoadedCheckpoint load_model(const RunConfig& cfg, const std::string& fallback) {
  const std::string path = cfg.model_path.empty() ? out_path(cfg, fallback) : cfg.model_path;
  return load_checkpoint(path);
}

inline ShiftScales resolve_lambda(const RunConfig& cfg, const NoiseSchedule& s) {
  if (cfg.lambda_path.empty()) return lambda_closed_form(s);
  ShiftScales l = read_lambda_csv(cfg.lambda_path);
  if (l.T() != s.T())
    throw std::runtime_error("shift-scale csv covers T=" + std::to_string(l.T()) +
                             " but the model schedule has T=" + std::to_string(s.T()));
  return l;
}

inline InversionConfig inversion_config(const RunConfig& cfg) {
  InversionConfig ic;
  ic.window = cfg.invert_window;
  ic.epochs = cfg.invert_epochs;
  ic.batch_size = cfg.invert_batch;
  ic.lr = cfg.invert_lr;
  ic.beta1 = cfg.invert_beta1;
  ic.beta2 = cfg.invert_beta2;
  ic.noise_init = cfg.invert_init == "noise";
  ic.max_unroll = cfg.invert_max_unroll;
  return ic;
}

}  // namespace detail

inline Summary run_gen_dataset(const RunConfig& cfg) {
  detail::prepare_out_dir(cfg);
  ImageDataset ds = gen_shapes_dataset(cfg.data_count, cfg.image_size,
                                       mix64(cfg.seed ^ fnv1a64("data", 4)));
  const std::string path = detail::out_path(cfg, "dataset.bin");
  save_image_records(path, ds);
  return {{"count", std::to_string(cfg.data_count)},
          {"size", std::to_string(cfg.image_size)},
          {"out", path}};
}

inline Summary run_train_clean(const RunConfig& cfg) {
  detail::prepare_out_dir(cfg);
  const NoiseSchedule s = detail::schedule_from(cfg);
  ImageDataset data = detail::dataset_from(cfg);
  DenoiserParams params =
      init_denoiser(detail::descriptor_from(cfg), mix64(cfg.seed ^ fnv1a64("init-clean", 10)));
  TrainConfig tc{cfg.train_epochs, cfg.train_batch, cfg.train_lr, cfg.train_beta1,
                 cfg.train_beta2, false};
  Rng rng = Rng::stream(cfg.seed, "train-clean");
  std::vector<double> trace;
  params = train_clean(params, s, data.images, tc, rng, &trace);
  const std::string ck = detail::out_path(cfg, "model_clean.pdck");
  save_checkpoint(ck, params, detail::run_metadata(cfg, "train-clean"));
  write_trace_csv(detail::out_path(cfg, "loss_clean.csv"), trace);
  return {{"epochs", std::to_string(cfg.train_epochs)},
          {"params", std::to_string(params.param_count())},
          {"final_loss", trace.empty() ? "nan" : format_double(trace.back())},
          {"out", ck}};
}

inline Summary run_train_backdoor(const RunConfig& cfg) {
  detail::prepare_out_dir(cfg);
  const NoiseSchedule s = detail::schedule_from(cfg);
  ImageDataset data = detail::dataset_from(cfg);

  BackdoorSpec spec;
  spec.trigger = detail::resolve_trigger(cfg);
  spec.target = detail::resolve_target(cfg);
  spec.family = cfg.attack_family == "baddiffusion" ? BackdoorFamily::BadDiffusion
                                                    : BackdoorFamily::TrojDiffForward;
  spec.gamma = cfg.attack_gamma;
  spec.poison_rate = cfg.attack_poison_rate;
  for (const std::string& w : spec.warnings()) std::cerr << "warning: " << w << "\n";

  DenoiserParams base;
  if (cfg.train_from_scratch) {
    base = init_denoiser(detail::descriptor_from(cfg),
                         mix64(cfg.seed ^ fnv1a64("init-backdoor", 13)));
  } else {
    const std::string base_path =
        cfg.base_model_path.empty() ? detail::out_path(cfg, "model_clean.pdck")
                                    : cfg.base_model_path;
    base = load_checkpoint(base_path).params;
  }

  TrainConfig tc{cfg.train_epochs, cfg.train_batch, cfg.train_lr, cfg.train_beta1,
                 cfg.train_beta2, cfg.train_from_scratch};
  Rng rng = Rng::stream(cfg.seed, "train-backdoor");
  std::vector<double> trace;
  DenoiserParams params = train_backdoor(base, s, spec, data.images, tc, rng, &trace);

  const std::string ck = detail::out_path(cfg, "model_backdoor.pdck");
  save_checkpoint(ck, params, detail::run_metadata(cfg, "train-backdoor"));
  write_trace_csv(detail::out_path(cfg, "loss_backdoor.csv"), trace);
  export_image_ppm(spec.trigger, detail::out_path(cfg, "trigger.ppm"));
  export_image_ppm(spec.target, detail::out_path(cfg, "target.ppm"));
  return {{"family", cfg.attack_family},
          {"poison_rate", format_double(cfg.attack_poison_rate)},
          {"final_loss", trace.empty() ? "nan" : format_double(trace.back())},
          {"out", ck}};
}

inline Summary run_estimate_lambda(const RunConfig& cfg, bool closed_form) {
  detail::prepare_out_dir(cfg);
  const std::string path = detail::out_path(cfg, "lambda.csv");
  if (closed_form) {
    const NoiseSchedule s = detail::schedule_from(cfg);
    ShiftScales l = lambda_closed_form(s);
    write_lambda_csv(path, l);
    return {{"mode", "closed-form"},
            {"T", std::to_string(s.T())},
            {"lambda_T", format_double(l.at(s.T()))},
            {"out", path}};
  }
  LoadedCheckpoint ck = detail::load_model(cfg, "model_backdoor.pdck");
  const NoiseSchedule s = detail::schedule_from_checkpoint(ck);
  SurrogateFinetuneConfig fc;
  fc.train.epochs = cfg.lambda_finetune_epochs;
  fc.train.lr = cfg.lambda_finetune_lr;
  fc.train.batch_size = cfg.train_batch;
  fc.poison_rate = cfg.lambda_poison_rate;
  fc.dataset_count = cfg.lambda_dataset_count;
  Rng rng = Rng::stream(cfg.seed, "lambda");
  ShiftScales l = estimate_lambda_empirical(ck.params, s, detail::resolve_surrogate(cfg), fc, rng,
                                            cfg.lambda_num_draws);
  write_lambda_csv(path, l);
  return {{"mode", "empirical"},
          {"num_draws", std::to_string(cfg.lambda_num_draws)},
          {"lambda_T", format_double(l.at(s.T()))},
          {"out", path}};
}

inline Summary run_invert(const RunConfig& cfg, bool elijah) {
  detail::prepare_out_dir(cfg);
  LoadedCheckpoint ck = detail::load_model(cfg, "model_backdoor.pdck");
  const NoiseSchedule s = detail::schedule_from_checkpoint(ck);
  const InversionConfig ic = detail::inversion_config(cfg);
  Rng rng = Rng::stream(cfg.seed, elijah ? "invert-elijah" : "invert");
  InversionResult res = elijah
                            ? invert_trigger_elijah_baseline(ck.params, s, ic, rng)
                            : invert_trigger(ck.params, s, detail::resolve_lambda(cfg, s), ic, rng);
  const std::string trig = detail::out_path(cfg, elijah ? "inverted_trigger_elijah.ppm"
                                                        : "inverted_trigger.ppm");
  export_image_ppm(res.trigger, trig);
  write_trace_csv(detail::out_path(cfg, elijah ? "trace_invert_elijah.csv" : "trace_invert.csv"),
                  res.loss_trace);
  return {{"mode", elijah ? "elijah" : "multi-step"},
          {"epochs", std::to_string(res.epochs_run)},
          {"final_loss", res.loss_trace.empty() ? "nan" : format_double(res.loss_trace.back())},
          {"out", trig}};
}

inline Summary run_detect(const RunConfig& cfg) {
  detail::prepare_out_dir(cfg);
  LoadedCheckpoint ck = detail::load_model(cfg, "model_backdoor.pdck");
  const NoiseSchedule s = detail::schedule_from_checkpoint(ck);
  DetectConfig dc{cfg.detect_threshold, cfg.detect_num_samples, cfg.detect_num_trials,
                  cfg.detect_asr_threshold};
  Rng rng = Rng::stream(cfg.seed, "detect");
  DetectionResult res =
      detect_backdoor(ck.params, s, detail::resolve_lambda(cfg, s),
                      detail::inversion_config(cfg), dc, rng);
  export_image_ppm(res.inversion.trigger, detail::out_path(cfg, "inverted_trigger.ppm"));
  write_report_csv(detail::out_path(cfg, "detect_report.csv"),
                   {{"verdict", res.backdoored ? "backdoored" : "clean"},
                    {"uniform_score", format_double(res.report.uniform_score)},
                    {"threshold", format_double(cfg.detect_threshold)},
                    {"num_samples", std::to_string(res.report.num_samples)}});
  return {{"verdict", res.backdoored ? "backdoored" : "clean"},
          {"uniform_score", format_double(res.report.uniform_score)},
          {"threshold", format_double(cfg.detect_threshold)}};
}

inline Summary run_metrics(const RunConfig& cfg) {
  detail::prepare_out_dir(cfg);
  LoadedCheckpoint ck = detail::load_model(cfg, "model_backdoor.pdck");
  const NoiseSchedule s = detail::schedule_from_checkpoint(ck);
  if (cfg.trigger_path.empty())
    throw std::invalid_argument("metrics: paths.trigger (the candidate trigger PPM) is required");
  ad::Tensor trigger = import_image_ppm(cfg.trigger_path);
  ad::Tensor target = cfg.target_path.empty() ? detail::resolve_target(cfg)
                                              : import_image_ppm(cfg.target_path);
  ad::Tensor gt = detail::resolve_trigger(cfg);

  Rng rng = Rng::stream(cfg.seed, "eval");
  const Predictor pred = make_predictor(ck.params);
  ad::Tensor samples = backdoor_sample(pred, s, trigger, rng, cfg.detect_num_samples);
  MetricReport rep;
  rep.uniform_score = uniform_score(samples);
  rep.num_samples = cfg.detect_num_samples;
  rep.num_trials = cfg.detect_num_samples;
  rep.asr = asr(samples, target, cfg.detect_asr_threshold);
  rep.asr_threshold = cfg.detect_asr_threshold;
  rep.l2_to_gt = l2_to_ground_truth(trigger, gt);

  export_image_ppm(make_image_grid(samples, 8), detail::out_path(cfg, "samples_grid.ppm"));
  write_report_csv(detail::out_path(cfg, "metrics_report.csv"),
                   {{"uniform_score", format_double(rep.uniform_score)},
                    {"asr", format_double(*rep.asr)},
                    {"asr_threshold", format_double(*rep.asr_threshold)},
                    {"l2_to_gt", format_double(*rep.l2_to_gt)},
                    {"num_samples", std::to_string(rep.num_samples)}});
  return {{"uniform_score", format_double(rep.uniform_score)},
          {"asr", format_double(*rep.asr)},
          {"l2_to_gt", format_double(*rep.l2_to_gt)}};
}

inline Summary run_export_report(const RunConfig& cfg) {
  detail::prepare_out_dir(cfg);
  static const char* kKnown[] = {"effective_config.txt", "loss_clean.csv", "loss_backdoor.csv",
                                 "lambda.csv",           "trace_invert.csv",
                                 "trace_invert_elijah.csv", "detect_report.csv",
                                 "metrics_report.csv"};
  std::ostringstream os;
  int included = 0;
  for (const char* name : kKnown) {
    const std::string path = detail::out_path(cfg, name);
    std::ifstream f(path, std::ios::binary);
    if (!f) continue;
    os << "==== " << name << " ====\n";
    os << f.rdbuf();
    os << "\n";
    ++included;
  }
  const std::string path = detail::out_path(cfg, "report.txt");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << os.str();
  return {{"sections", std::to_string(included)}, {"out", path}};
}

}  // namespace puredesk
