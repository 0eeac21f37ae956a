// puredesk: train small denoising diffusion models, plant trigger/target
// backdoors in them, estimate per-timestep trigger-shift scales, invert
// triggers by gradient descent through the unrolled denoising chain, and
// flag backdoored models from the inverted trigger's sampling statistics.

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "puredesk/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out_dir;
  std::string seed;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("-c,--config", o.config_file, "configuration file (section.key = value lines)");
  cmd->add_option("--set", o.sets, "override a config key, e.g. --set train.epochs=10")
      ->take_all();
  cmd->add_option("-o,--out", o.out_dir, "output directory (run.out_dir)");
  cmd->add_option("--seed", o.seed, "root seed (run.seed)");
}

puredesk::RunConfig build_config(const CommonOpts& o) {
  puredesk::RunConfig cfg;
  if (!o.config_file.empty()) puredesk::load_config_file(cfg, o.config_file);
  for (const std::string& kv : o.sets) puredesk::apply_config_line(cfg, kv);
  if (!o.out_dir.empty()) cfg.set("run.out_dir", o.out_dir);
  if (!o.seed.empty()) cfg.set("run.seed", o.seed);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale diffusion backdoor laboratory"};
  app.require_subcommand(1);

  CommonOpts gen_o, tc_o, tb_o, el_o, inv_o, det_o, met_o, rep_o;
  std::string tb_base, el_model, inv_model, inv_lambda, det_model, det_lambda, met_model,
      met_trigger, met_target;
  bool el_closed = false, el_empirical = false, inv_elijah = false;

  CLI::App* gen = app.add_subcommand("gen-dataset", "generate the procedural shapes dataset");
  add_common(gen, gen_o);

  CLI::App* tc = app.add_subcommand("train-clean", "train a clean denoiser from scratch");
  add_common(tc, tc_o);

  CLI::App* tb = app.add_subcommand("train-backdoor", "plant a backdoor by fine-tuning");
  add_common(tb, tb_o);
  tb->add_option("--base", tb_base, "base checkpoint to fine-tune (paths.base_model)");

  CLI::App* el = app.add_subcommand("estimate-lambda", "per-timestep trigger-shift scales");
  add_common(el, el_o);
  el->add_flag("--closed-form", el_closed, "evaluate the schedule formula");
  el->add_flag("--empirical", el_empirical, "measure on a surrogate-backdoored copy");
  el->add_option("--model", el_model, "model checkpoint (paths.model)");

  CLI::App* inv = app.add_subcommand("invert", "learn a trigger from a suspicious model");
  add_common(inv, inv_o);
  inv->add_option("--model", inv_model, "model checkpoint (paths.model)");
  inv->add_option("--lambda", inv_lambda, "shift-scale csv (paths.lambda); default closed form");
  inv->add_flag("--elijah", inv_elijah, "single-step baseline with a fixed 0.5 scale");

  CLI::App* det = app.add_subcommand("detect", "invert a trigger and classify the model");
  add_common(det, det_o);
  det->add_option("--model", det_model, "model checkpoint (paths.model)");
  det->add_option("--lambda", det_lambda, "shift-scale csv (paths.lambda); default closed form");

  CLI::App* met = app.add_subcommand("metrics", "uniform score / ASR / L2 of a trigger");
  add_common(met, met_o);
  met->add_option("--model", met_model, "model checkpoint (paths.model)");
  met->add_option("--trigger", met_trigger, "candidate trigger PPM (paths.trigger)")->required();
  met->add_option("--target", met_target, "backdoor target PPM (paths.target)");

  CLI::App* rep = app.add_subcommand("export-report", "bundle this run's artifacts into one file");
  add_common(rep, rep_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    puredesk::Summary summary;
    std::string cmd;
    if (gen->parsed()) {
      cmd = "gen-dataset";
      summary = puredesk::run_gen_dataset(build_config(gen_o));
    } else if (tc->parsed()) {
      cmd = "train-clean";
      summary = puredesk::run_train_clean(build_config(tc_o));
    } else if (tb->parsed()) {
      cmd = "train-backdoor";
      puredesk::RunConfig cfg = build_config(tb_o);
      if (!tb_base.empty()) cfg.set("paths.base_model", tb_base);
      summary = puredesk::run_train_backdoor(cfg);
    } else if (el->parsed()) {
      cmd = "estimate-lambda";
      if (el_closed == el_empirical)
        throw std::invalid_argument("estimate-lambda: pass exactly one of --closed-form/--empirical");
      puredesk::RunConfig cfg = build_config(el_o);
      if (!el_model.empty()) cfg.set("paths.model", el_model);
      summary = puredesk::run_estimate_lambda(cfg, el_closed);
    } else if (inv->parsed()) {
      cmd = "invert";
      puredesk::RunConfig cfg = build_config(inv_o);
      if (!inv_model.empty()) cfg.set("paths.model", inv_model);
      if (!inv_lambda.empty()) cfg.set("paths.lambda", inv_lambda);
      summary = puredesk::run_invert(cfg, inv_elijah);
    } else if (det->parsed()) {
      cmd = "detect";
      puredesk::RunConfig cfg = build_config(det_o);
      if (!det_model.empty()) cfg.set("paths.model", det_model);
      if (!det_lambda.empty()) cfg.set("paths.lambda", det_lambda);
      summary = puredesk::run_detect(cfg);
    } else if (met->parsed()) {
      cmd = "metrics";
      puredesk::RunConfig cfg = build_config(met_o);
      if (!met_model.empty()) cfg.set("paths.model", met_model);
      cfg.set("paths.trigger", met_trigger);
      if (!met_target.empty()) cfg.set("paths.target", met_target);
      summary = puredesk::run_metrics(cfg);
    } else if (rep->parsed()) {
      cmd = "export-report";
      summary = puredesk::run_export_report(build_config(rep_o));
    }
    summary.insert(summary.begin(), {"status", "ok"});
    std::cout << puredesk::format_summary(cmd, summary) << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
