// keyplan command-line front end. Every subcommand writes config.echo into
// its run directory; usage problems exit with 2, runtime failures with 1.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "keyplan/config.hpp"
#include "keyplan/pipeline.hpp"
#include "keyplan/report.hpp"
#include "keyplan/server.hpp"

namespace fs = std::filesystem;
using namespace keyplan;

namespace {

/// Bad invocation or missing input: exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::string run_dir = "run";
};

RunConfig load_config(const Common& c) {
  RunConfig cfg;
  if (!c.config_file.empty()) {
    if (!fs::exists(c.config_file)) throw UsageError("config file not found: " + c.config_file);
    cfg.merge_file(c.config_file);
  }
  for (const auto& kv : c.sets) {
    try {
      cfg.assign(kv);
    } catch (const InvalidInput& e) {
      throw UsageError(e.what());
    }
  }
  return cfg;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError("missing " + what);
  if (!fs::exists(path)) throw UsageError(what + " not found: " + path);
}

/// Prepares the run directory and echoes the effective config into it.
RunConfig begin_run(const Common& c) {
  auto cfg = load_config(c);
  fs::create_directories(c.run_dir);
  cfg.write_echo((fs::path(c.run_dir) / "config.echo").string());
  return cfg;
}

std::string out_path(const Common& c, const std::string& given, const std::string& fallback) {
  return given.empty() ? (fs::path(c.run_dir) / fallback).string() : given;
}

void info(const std::string& msg) { std::cerr << msg << std::endl; }

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_file, "key = value config file");
  sub->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  sub->add_option("--run-dir", c.run_dir, "output directory for config.echo, metrics and reports");
}

nlohmann::json events_json(const sim::ExpertRun& r) {
  nlohmann::json placements = nlohmann::json::array();
  for (const auto& p : r.task.placements) placements.push_back({{"block", p.block_color}, {"pad", p.pad_color}});
  return {{"episode_id", r.episode.id},
          {"grasp_times", r.events.grasp_times},
          {"release_times", r.events.release_times},
          {"align_times", r.events.align_times},
          {"task", placements}};
}

std::vector<KeystepSet> load_keysteps(const std::string& csv, const std::vector<Episode>& eps) {
  return keysteps_from_rows(eps, read_keystep_csv(csv));
}

std::string checkpoint_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a(bytes));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keyplan: structured-frame planning and action policies on a toy manipulation world"};
  app.require_subcommand(1);
  Common common;
  std::string in, out, episodes_path, keysteps_path, codecs_path, seq_path, ckpt_path, init_path, events_path;
  std::string stage = "policy", mode, experiment;
  int port = -1;

  auto* gen = app.add_subcommand("gen-data", "generate scripted demonstrations (episode and event JSONL)");
  add_common(gen, common);
  gen->add_option("--out", out, "episode JSONL");
  gen->add_option("--events", events_path, "event log JSONL");

  auto* extract = app.add_subcommand("extract", "extract keystep candidates into CSV");
  add_common(extract, common);
  extract->add_option("--in", in, "episode JSONL")->required();
  extract->add_option("--out", out, "keystep CSV");

  auto* filter = app.add_subcommand("filter", "filter keystep candidates and rewrite the CSV");
  add_common(filter, common);
  filter->add_option("--in", in, "keystep CSV")->required();
  filter->add_option("--episodes", episodes_path, "episode JSONL")->required();
  filter->add_option("--out", out, "filtered keystep CSV");
  filter->add_option("--mode", mode, "stub or remote (overrides filter.mode)");

  auto* fit = app.add_subcommand("fit-codecs", "fit the vision and action codecs");
  add_common(fit, common);
  fit->add_option("--in", in, "episode JSONL")->required();
  fit->add_option("--out", out, "codec bundle");

  auto* tokenize = app.add_subcommand("tokenize", "stream episodes into token JSONL");
  add_common(tokenize, common);
  tokenize->add_option("--in", in, "episode JSONL")->required();
  tokenize->add_option("--codecs", codecs_path, "codec bundle")->required();
  tokenize->add_option("--out", out, "token JSONL");

  auto* build = app.add_subcommand("build-seq", "build planner or policy training sequences");
  add_common(build, common);
  build->add_option("--episodes", episodes_path, "episode JSONL")->required();
  build->add_option("--keysteps", keysteps_path, "keystep CSV (planner stage)");
  build->add_option("--codecs", codecs_path, "codec bundle")->required();
  build->add_option("--stage", stage, "planner or policy")->check(CLI::IsMember({"planner", "policy"}));
  build->add_option("--out", out, "sequence JSONL");

  auto* train = app.add_subcommand("train", "train one stage from sequence JSONL");
  add_common(train, common);
  train->add_option("--seq", seq_path, "sequence JSONL")->required();
  train->add_option("--codecs", codecs_path, "codec bundle")->required();
  train->add_option("--stage", stage, "planner or policy")->check(CLI::IsMember({"planner", "policy"}));
  train->add_option("--init", init_path, "checkpoint to continue from (policy stage)");
  train->add_option("--out", out, "checkpoint path");

  auto* rollout = app.add_subcommand("rollout", "greedy planner rollout on planner sequences");
  add_common(rollout, common);
  rollout->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  rollout->add_option("--codecs", codecs_path, "codec bundle")->required();
  rollout->add_option("--seq", seq_path, "planner sequence JSONL")->required();
  rollout->add_option("--out", out, "prediction JSONL");

  auto* eval = app.add_subcommand("eval", "closed-loop evaluation in the toy world");
  add_common(eval, common);
  eval->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  eval->add_option("--codecs", codecs_path, "codec bundle")->required();

  auto* serve = app.add_subcommand("serve", "serve POST /act and GET /health");
  add_common(serve, common);
  serve->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  serve->add_option("--codecs", codecs_path, "codec bundle")->required();
  serve->add_option("--port", port, "listen port (KEYPLAN_SERVE_PORT overrides)");

  auto* report = app.add_subcommand("report", "render report CSV and plots from a run directory");
  add_common(report, common);

  auto* pipeline = app.add_subcommand("pipeline", "run the whole desk pipeline in memory and evaluate");
  add_common(pipeline, common);

  auto* exp = app.add_subcommand("experiment", "run an experiment driver");
  add_common(exp, common);
  exp->add_option("name", experiment, "history, efficiency or extraction")
      ->required()
      ->check(CLI::IsMember({"history", "efficiency", "extraction"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    const fs::path dir(common.run_dir);

    if (active == gen) {
      const auto cfg = begin_run(common);
      const auto runs = sim::generate_demos(cfg.i32("data.episodes"), cfg.i32("data.placements"),
                                            cfg.real("data.sigma"), cfg.u64("data.seed"), cfg.sim());
      save_episodes(out_path(common, out, "episodes.jsonl"), episodes_of(runs));
      std::ofstream ev(out_path(common, events_path, "events.jsonl"));
      if (!ev) throw Error("cannot write event log");
      for (const auto& r : runs) ev << events_json(r).dump() << '\n';
      info("wrote " + std::to_string(runs.size()) + " episodes");

    } else if (active == extract) {
      require_file(in, "episode file");
      const auto cfg = begin_run(common);
      const auto eps = load_episodes(in);
      const auto ex = cfg.extractor();
      std::vector<KeystepSet> sets;
      for (const auto& ep : eps) sets.push_back(extract_keysteps(ep, ex));
      std::ofstream o(out_path(common, out, "keysteps.csv"), std::ios::binary);
      if (!o) throw Error("cannot write keystep CSV");
      write_keystep_csv(o, eps, sets);

    } else if (active == filter) {
      require_file(in, "keystep CSV");
      require_file(episodes_path, "episode file");
      auto cfg = load_config(common);
      if (!mode.empty()) cfg.set("filter.mode", mode);
      fs::create_directories(dir);
      cfg.write_echo((dir / "config.echo").string());
      const auto eps = load_episodes(episodes_path);
      const auto resp = run_filter(eps, read_keystep_csv(in), cfg.str("filter.mode"), cfg.real("filter.threshold"));
      rewrite_csv(in, resp, out_path(common, out, "keysteps.filtered.csv"));
      nlohmann::json j{{"filtered_ok", resp.filtered_ok}, {"problems", resp.problems}, {"kept_rows", resp.kept_rows}};
      write_text((dir / "filter_response.json").string(), j.dump(2) + "\n");
      info("kept " + std::to_string(resp.kept_rows.size()) + " rows");

    } else if (active == fit) {
      require_file(in, "episode file");
      const auto cfg = begin_run(common);
      const auto ts = fit_token_space(load_episodes(in), cfg.codecs());
      for (const auto& w : ts.action().warnings()) info("warning: " + w);
      ts.save_file(out_path(common, out, "codecs.bin"));
      info("codec bundle " + ts.hash());

    } else if (active == tokenize) {
      require_file(in, "episode file");
      require_file(codecs_path, "codec bundle");
      const auto cfg = begin_run(common);
      const auto ts = TokenSpace::load_file(codecs_path);
      const int h = ts.action().horizon();
      std::ifstream src(in);
      std::ofstream o(out_path(common, out, "tokens.jsonl"));
      if (!o) throw Error("cannot write token file");
      std::string line;
      int lineno = 0;
      while (std::getline(src, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        Episode ep;
        try {
          ep = episode_from_json(nlohmann::json::parse(line));
          validate_episode(ep);
        } catch (const std::exception& e) {
          throw InvalidInput(in + " line " + std::to_string(lineno) + ": " + e.what());
        }
        nlohmann::json frames = nlohmann::json::array(), chunks = nlohmann::json::array();
        for (const auto& f : encode_frames(ep, ts)) frames.push_back(f);
        for (int t = 0; t + h <= ep.T; t += h) {
          ActionChunk c;
          for (int i = 0; i < h; ++i) c.push_back(flatten_action(ep.actions[static_cast<std::size_t>(t + i)]));
          chunks.push_back({{"t", t}, {"tokens", ts.encode_action(c)}});
        }
        o << nlohmann::json{{"id", ep.id}, {"instruction", ts.encode_text(ep.instruction)}, {"frames", frames},
                            {"chunks", chunks}}
                 .dump()
          << '\n';
      }

    } else if (active == build) {
      require_file(episodes_path, "episode file");
      require_file(codecs_path, "codec bundle");
      if (stage == "planner") require_file(keysteps_path, "keystep CSV");
      const auto cfg = begin_run(common);
      const auto ts = TokenSpace::load_file(codecs_path);
      const auto eps = load_episodes(episodes_path);
      const auto bc = cfg.build();
      bc.check_codec(ts);
      const auto seqs = stage == "planner" ? planner_samples(eps, load_keysteps(keysteps_path, eps), bc, ts)
                                           : policy_samples(eps, bc, ts);
      save_sequences(out_path(common, out, stage + ".seq.jsonl"), seqs);
      info("wrote " + std::to_string(seqs.size()) + " " + stage + " sequences");

    } else if (active == train) {
      require_file(seq_path, "sequence file");
      require_file(codecs_path, "codec bundle");
      if (!init_path.empty()) require_file(init_path, "initial checkpoint");
      const auto cfg = begin_run(common);
      const auto ts = TokenSpace::load_file(codecs_path);
      const auto seqs = load_sequences(seq_path);
      const Stage st = stage_from_string(stage);
      std::ofstream metrics(dir / "metrics.jsonl", std::ios::app);
      const auto hooks = metric_hooks(&metrics, stage + "-s" + cfg.str("run.seed"), info);
      Model<float> model;
      if (st == Stage::Planner) {
        model = train_stage1(seqs, cfg.model(ts.vocab_size()), cfg.train(st), ts, hooks);
      } else {
        Model<float> init;
        if (!init_path.empty()) {
          init = load_checkpoint<float>(init_path);
          if (init.config().vocab != ts.vocab_size()) throw InvalidInput("initial checkpoint vocabulary does not match codecs");
        } else {
          init = Model<float>(cfg.model(ts.vocab_size()));
          init.init(cfg.u64("run.seed"));
        }
        model = train_stage2(std::move(init), seqs, cfg.train(st), ts, hooks);
      }
      const auto path = out_path(common, out, stage + ".ckpt");
      save_checkpoint(path, model, {static_cast<int>(st), cfg.train(st).steps});
      info("checkpoint " + path + " " + checkpoint_hash(path));

    } else if (active == rollout) {
      require_file(ckpt_path, "checkpoint");
      require_file(codecs_path, "codec bundle");
      require_file(seq_path, "sequence file");
      begin_run(common);
      const auto ts = TokenSpace::load_file(codecs_path);
      const auto model = load_checkpoint<float>(ckpt_path);
      const auto seqs = load_sequences(seq_path);
      std::ofstream o(out_path(common, out, "rollout.jsonl"));
      PlannerFidelity total;
      for (const auto& s : seqs) {
        if (s.stage != Stage::Planner) throw InvalidInput("rollout expects planner sequences");
        const auto f = planner_fidelity(model, ts, {s});
        const std::span<const int> prefix(s.tokens.data(), s.first_masked());
        o << nlohmann::json{{"episode_id", s.meta.episode_id},
                            {"target", s.meta.target},
                            {"predicted", planner_rollout(model, ts, prefix, static_cast<int>(s.masked_count()))},
                            {"accuracy", f.accuracy()}}
                 .dump()
          << '\n';
        total.samples += f.samples;
        total.tokens += f.tokens;
        total.correct += f.correct;
      }
      info("token accuracy " + fmt_num(total.accuracy()) + " over " + std::to_string(total.samples) + " frames");

    } else if (active == eval) {
      require_file(ckpt_path, "checkpoint");
      require_file(codecs_path, "codec bundle");
      const auto cfg = begin_run(common);
      const auto ts = TokenSpace::load_file(codecs_path);
      const auto model = load_checkpoint<float>(ckpt_path);
      const int H = cfg.i32("build.history");
      const auto sum = evaluate_model(model, ts, cfg, H);
      MetricsReport rep;
      rep.title = "closed-loop evaluation, exec_k " + cfg.str("eval.exec_k");
      rep.notes.push_back("checkpoint " + checkpoint_hash(ckpt_path) + ", config hash " + cfg.hash());
      const std::string run_id = "eval-s" + cfg.str("eval.seed");
      rep.add_success(run_id, "eval", "H=" + std::to_string(H), cfg.u64("eval.seed"), sum.successes,
                      static_cast<int>(sum.trials.size()));
      rep.add_value(run_id, "eval", "H=" + std::to_string(H), cfg.u64("eval.seed"), "mean_queries",
                    fmt_num(sum.mean_queries, 2));
      write_report_csv((dir / "report.csv").string(), rep);
      info("success " + std::to_string(sum.successes) + "/" + std::to_string(sum.trials.size()));

    } else if (active == serve) {
      require_file(ckpt_path, "checkpoint");
      require_file(codecs_path, "codec bundle");
      const auto cfg = begin_run(common);
      ServeLimits lim{cfg.i32("serve.max_image_side"), cfg.i32("serve.max_history")};
      PolicyService svc(load_checkpoint<float>(ckpt_path), TokenSpace::load_file(codecs_path),
                        cfg.i32("build.history"), cfg.hash(), lim);
      httplib::Server svr;
      install_routes(svr, svc, static_cast<std::size_t>(cfg.i32("serve.queue")));
      const int p = resolve_port(port >= 0 ? port : cfg.i32("serve.port"));
      info("serving on 127.0.0.1:" + std::to_string(p) + " model " + svc.model_hash());
      if (!svr.listen("127.0.0.1", p)) throw Error("cannot listen on port " + std::to_string(p));

    } else if (active == report) {
      load_config(common);
      const auto metrics = dir / "metrics.jsonl";
      const auto csv = dir / "report.csv";
      if (!fs::exists(metrics) && !fs::exists(csv))
        throw UsageError("run directory " + common.run_dir + " has neither metrics.jsonl nor report.csv");
      fs::create_directories(dir / "plots");
      MetricsReport rep;
      if (fs::exists(csv)) rep = read_report_csv(csv.string());
      if (fs::exists(metrics)) {
        rep.curves = read_loss_curves(metrics.string());
        write_text((dir / "plots" / "loss.svg").string(), loss_plot_svg(rep.curves, "training loss"));
        if (!fs::exists(csv)) {
          rep.title = "final training loss per run";
          for (const auto& c : rep.curves)
            if (!c.points.empty())
              rep.add_value(c.label, "train", c.label, 0, "final_loss", fmt_num(c.points.back().loss));
        }
      }
      if (const auto bars = success_bars(rep); !bars.empty())
        write_text((dir / "plots" / "success.svg").string(), bar_plot_svg(bars, "success rate (Wilson 95%)"));
      write_report_csv(csv.string(), rep);

    } else if (active == pipeline) {
      const auto cfg = begin_run(common);
      Stopwatch sw;
      const auto data = prepare_data(cfg, info);
      std::ofstream metrics(dir / "metrics.jsonl");
      const std::string run_id = "pipeline-s" + cfg.str("run.seed");
      const auto model = train_pipeline(data, cfg, metric_hooks(&metrics, run_id, info), metric_hooks(&metrics, run_id, info));
      save_checkpoint((dir / "model.ckpt").string(), model, {2, cfg.train(Stage::Policy).steps});
      data.ts.save_file((dir / "codecs.bin").string());
      const auto sum = evaluate_model(model, data.ts, cfg, data.build.history);
      const auto heldout = heldout_planner_samples(cfg, data.ts, 50, cfg.u64("data.seed") + 500000);
      const auto fid = planner_fidelity(model, data.ts, heldout);
      MetricsReport rep;
      rep.title = "desk pipeline";
      rep.notes.push_back("config hash " + cfg.hash() + ", wall time " + fmt_num(sw.seconds(), 1) + "s");
      rep.add_success(run_id, "pipeline", "two-stage", cfg.u64("run.seed"), sum.successes,
                      static_cast<int>(sum.trials.size()));
      rep.add_value(run_id, "pipeline", "two-stage", cfg.u64("run.seed"), "planner_token_accuracy",
                    fmt_num(fid.accuracy()));
      write_report_csv((dir / "report.csv").string(), rep);
      info("success " + std::to_string(sum.successes) + "/" + std::to_string(sum.trials.size()) +
           ", planner token accuracy " + fmt_num(fid.accuracy()));

    } else if (active == exp) {
      const auto cfg = begin_run(common);
      std::ofstream metrics(dir / "metrics.jsonl");
      const auto rep = experiment == "history"      ? experiment_history_sweep(cfg, &metrics, info)
                       : experiment == "efficiency" ? experiment_efficiency(cfg, &metrics, info)
                                                    : experiment_extraction(cfg);
      write_report_csv((dir / "report.csv").string(), rep);
      if (!rep.complete) info("report incomplete");
    }
  } catch (const UsageError& e) {
    std::cerr << nlohmann::json{{"level", "error"}, {"command", active->get_name()}, {"kind", "usage"}, {"message", e.what()}}
                     .dump()
              << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"level", "error"}, {"command", active->get_name()}, {"kind", "runtime"}, {"message", e.what()}}
                     .dump()
              << std::endl;
    return 1;
  }
  return 0;
}
