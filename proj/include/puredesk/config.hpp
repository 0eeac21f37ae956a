#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "puredesk/csv.hpp"

namespace puredesk {

/// Flat run configuration. Every pipeline stage reads from this one struct;
/// the on-disk format is one "section.key = value" assignment per line with
/// '#' comments. Unknown keys are rejected; numeric values are bounds-checked
/// when the stage consumes them.
struct RunConfig {
  // schedule
  int T = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;
  // model
  int image_size = 16;
  int channels = 3;
  std::vector<int> widths = {32, 64};
  int embed_dim = 64;
  // data
  int data_count = 256;
  std::string data_path;  // empty: regenerate procedurally from the seed
  // train
  int train_epochs = 40;
  int train_batch = 16;
  double train_lr = 1e-3;
  double train_beta1 = 0.9;
  double train_beta2 = 0.999;
  bool train_from_scratch = false;
  // attack
  std::string attack_family = "baddiffusion";  // or "trojdiff-forward"
  double attack_gamma = 0.5;
  double attack_poison_rate = 0.1;
  std::string attack_trigger = "default";  // "default" or a PPM path
  std::string attack_target = "default";   // "default" or a PPM path
  int attack_trigger_patch = 6;
  double attack_trigger_value = 0.6;
  // lambda estimation
  int lambda_num_draws = 64;
  int lambda_finetune_epochs = 8;
  double lambda_finetune_lr = 1e-3;
  double lambda_poison_rate = 0.2;
  int lambda_dataset_count = 192;
  std::string lambda_surrogate = "patch";  // "patch", "cross" or a PPM path
  // inversion
  int invert_window = 10;
  int invert_epochs = 30;
  int invert_batch = 40;
  double invert_lr = 0.1;
  double invert_beta1 = 0.9;
  double invert_beta2 = 0.999;
  std::string invert_init = "zeros";  // "zeros" or "noise"
  int invert_max_unroll = 12;
  // detection / metrics
  double detect_threshold = 0.05;
  int detect_num_samples = 64;
  int detect_num_trials = 64;
  double detect_asr_threshold = 0.5;
  // run
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  int threads = 1;
  // artifact paths (inputs of later stages; empty: the stage default)
  std::string model_path;
  std::string base_model_path;
  std::string lambda_path;
  std::string trigger_path;
  std::string target_path;

  void set(const std::string& key, const std::string& value);
  std::string echo() const;
};

namespace detail {

inline int parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  int r;
  try {
    r = std::stoi(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: " + key + ": not an integer: '" + v + "'");
  }
  if (pos != v.size()) throw std::invalid_argument("config: " + key + ": not an integer: '" + v + "'");
  return r;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double r;
  try {
    r = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: " + key + ": not a number: '" + v + "'");
  }
  if (pos != v.size()) throw std::invalid_argument("config: " + key + ": not a number: '" + v + "'");
  return r;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: " + key + ": expected true/false, got '" + v + "'");
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  auto i = [&] { return detail::parse_int(key, value); };
  auto d = [&] { return detail::parse_double(key, value); };
  auto b = [&] { return detail::parse_bool(key, value); };
  auto pos_i = [&](int lo, int hi) {
    const int v = detail::parse_int(key, value);
    if (v < lo || v > hi)
      throw std::invalid_argument("config: " + key + "=" + value + " outside [" +
                                  std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return v;
  };

  if (key == "schedule.T") T = pos_i(1, 100000);
  else if (key == "schedule.beta_start") beta_start = d();
  else if (key == "schedule.beta_end") beta_end = d();
  else if (key == "model.image_size") image_size = pos_i(4, 256);
  else if (key == "model.channels") channels = pos_i(1, 8);
  else if (key == "model.widths") {
    widths.clear();
    std::istringstream ws(value);
    std::string tok;
    while (std::getline(ws, tok, ',')) widths.push_back(detail::parse_int(key, detail::trim(tok)));
    if (widths.empty()) throw std::invalid_argument("config: model.widths: empty list");
  } else if (key == "model.embed_dim") embed_dim = pos_i(4, 1024);
  else if (key == "data.count") data_count = pos_i(1, 1000000);
  else if (key == "data.path") data_path = value;
  else if (key == "train.epochs") train_epochs = pos_i(0, 1000000);
  else if (key == "train.batch_size") train_batch = pos_i(1, 100000);
  else if (key == "train.lr") train_lr = d();
  else if (key == "train.beta1") train_beta1 = d();
  else if (key == "train.beta2") train_beta2 = d();
  else if (key == "train.from_scratch") train_from_scratch = b();
  else if (key == "attack.family") {
    if (value != "baddiffusion" && value != "trojdiff-forward")
      throw std::invalid_argument("config: attack.family must be baddiffusion or trojdiff-forward");
    attack_family = value;
  } else if (key == "attack.gamma") attack_gamma = d();
  else if (key == "attack.poison_rate") attack_poison_rate = d();
  else if (key == "attack.trigger") attack_trigger = value;
  else if (key == "attack.target") attack_target = value;
  else if (key == "attack.trigger_patch") attack_trigger_patch = pos_i(1, 256);
  else if (key == "attack.trigger_value") attack_trigger_value = d();
  else if (key == "lambda.num_draws") lambda_num_draws = pos_i(1, 100000);
  else if (key == "lambda.finetune_epochs") lambda_finetune_epochs = pos_i(0, 100000);
  else if (key == "lambda.finetune_lr") lambda_finetune_lr = d();
  else if (key == "lambda.poison_rate") lambda_poison_rate = d();
  else if (key == "lambda.dataset_count") lambda_dataset_count = pos_i(1, 1000000);
  else if (key == "lambda.surrogate") lambda_surrogate = value;
  else if (key == "invert.window") invert_window = pos_i(1, 100000);
  else if (key == "invert.epochs") invert_epochs = pos_i(0, 1000000);
  else if (key == "invert.batch_size") invert_batch = pos_i(1, 100000);
  else if (key == "invert.lr") invert_lr = d();
  else if (key == "invert.beta1") invert_beta1 = d();
  else if (key == "invert.beta2") invert_beta2 = d();
  else if (key == "invert.init") {
    if (value != "zeros" && value != "noise")
      throw std::invalid_argument("config: invert.init must be zeros or noise");
    invert_init = value;
  } else if (key == "invert.max_unroll") invert_max_unroll = pos_i(0, 100000);
  else if (key == "detect.threshold") detect_threshold = d();
  else if (key == "detect.num_samples") detect_num_samples = pos_i(2, 100000);
  else if (key == "detect.num_trials") detect_num_trials = pos_i(1, 100000);
  else if (key == "detect.asr_threshold") detect_asr_threshold = d();
  else if (key == "run.seed") {
    try {
      seed = std::stoull(value);
    } catch (const std::exception&) {
      throw std::invalid_argument("config: run.seed: not an unsigned integer: '" + value + "'");
    }
  } else if (key == "run.out_dir") out_dir = value;
  else if (key == "run.threads") threads = pos_i(1, 256);
  else if (key == "paths.model") model_path = value;
  else if (key == "paths.base_model") base_model_path = value;
  else if (key == "paths.lambda") lambda_path = value;
  else if (key == "paths.trigger") trigger_path = value;
  else if (key == "paths.target") target_path = value;
  else throw std::invalid_argument("config: unknown key '" + key + "'");
  (void)i;
}

/// Canonical text form: every key, one assignment per line. Written into the
/// output directory so each run records its effective configuration.
inline std::string RunConfig::echo() const {
  std::ostringstream os;
  os << "schedule.T = " << T << "\n";
  os << "schedule.beta_start = " << format_double(beta_start) << "\n";
  os << "schedule.beta_end = " << format_double(beta_end) << "\n";
  os << "model.image_size = " << image_size << "\n";
  os << "model.channels = " << channels << "\n";
  os << "model.widths = ";
  for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
  os << "\n";
  os << "model.embed_dim = " << embed_dim << "\n";
  os << "data.count = " << data_count << "\n";
  os << "data.path = " << data_path << "\n";
  os << "train.epochs = " << train_epochs << "\n";
  os << "train.batch_size = " << train_batch << "\n";
  os << "train.lr = " << format_double(train_lr) << "\n";
  os << "train.beta1 = " << format_double(train_beta1) << "\n";
  os << "train.beta2 = " << format_double(train_beta2) << "\n";
  os << "train.from_scratch = " << (train_from_scratch ? "true" : "false") << "\n";
  os << "attack.family = " << attack_family << "\n";
  os << "attack.gamma = " << format_double(attack_gamma) << "\n";
  os << "attack.poison_rate = " << format_double(attack_poison_rate) << "\n";
  os << "attack.trigger = " << attack_trigger << "\n";
  os << "attack.target = " << attack_target << "\n";
  os << "attack.trigger_patch = " << attack_trigger_patch << "\n";
  os << "attack.trigger_value = " << format_double(attack_trigger_value) << "\n";
  os << "lambda.num_draws = " << lambda_num_draws << "\n";
  os << "lambda.finetune_epochs = " << lambda_finetune_epochs << "\n";
  os << "lambda.finetune_lr = " << format_double(lambda_finetune_lr) << "\n";
  os << "lambda.poison_rate = " << format_double(lambda_poison_rate) << "\n";
  os << "lambda.dataset_count = " << lambda_dataset_count << "\n";
  os << "lambda.surrogate = " << lambda_surrogate << "\n";
  os << "invert.window = " << invert_window << "\n";
  os << "invert.epochs = " << invert_epochs << "\n";
  os << "invert.batch_size = " << invert_batch << "\n";
  os << "invert.lr = " << format_double(invert_lr) << "\n";
  os << "invert.beta1 = " << format_double(invert_beta1) << "\n";
  os << "invert.beta2 = " << format_double(invert_beta2) << "\n";
  os << "invert.init = " << invert_init << "\n";
  os << "invert.max_unroll = " << invert_max_unroll << "\n";
  os << "detect.threshold = " << format_double(detect_threshold) << "\n";
  os << "detect.num_samples = " << detect_num_samples << "\n";
  os << "detect.num_trials = " << detect_num_trials << "\n";
  os << "detect.asr_threshold = " << format_double(detect_asr_threshold) << "\n";
  os << "run.seed = " << seed << "\n";
  os << "run.out_dir = " << out_dir << "\n";
  os << "run.threads = " << threads << "\n";
  os << "paths.model = " << model_path << "\n";
  os << "paths.base_model = " << base_model_path << "\n";
  os << "paths.lambda = " << lambda_path << "\n";
  os << "paths.trigger = " << trigger_path << "\n";
  os << "paths.target = " << target_path << "\n";
  return os.str();
}

inline void apply_config_line(RunConfig& cfg, const std::string& raw, int lineno = 0) {
  std::string line = raw;
  const auto hash = line.find('#');
  if (hash != std::string::npos) line = line.substr(0, hash);
  line = detail::trim(line);
  if (line.empty()) return;
  const auto eq = line.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                ": expected key = value");
  cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) apply_config_line(cfg, line, ++lineno);
}

}  // namespace puredesk
