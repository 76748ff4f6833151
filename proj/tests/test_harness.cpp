#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>
#include <spawn.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "fixtures.hpp"
#include "keyplan/config.hpp"
#include "keyplan/report.hpp"
#include "keyplan/server.hpp"

extern char** environ;

using namespace keyplan;

namespace {

struct Served {
  std::vector<sim::ExpertRun> runs;
  TokenSpace ts;
  Model<float> model;
};

const Served& served() {
  static const Served s = [] {
    Served s;
    s.runs = sim::generate_demos(3, 1, 0.005, 61);
    std::vector<Episode> eps;
    for (const auto& r : s.runs) eps.push_back(r.episode);
    CodecFitConfig cfg;
    cfg.vision_k = 16;
    s.ts = fit_token_space(eps, cfg);
    ModelConfig mc;
    mc.vocab = s.ts.vocab_size();
    mc.d_model = 16;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.maxlen = 256;
    s.model = Model<float>(mc);
    s.model.init(8);
    return s;
  }();
  return s;
}

nlohmann::json image_json(const Image& img) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < img.height; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < img.width; ++c) row.push_back(img.at(r, c));
    rows.push_back(row);
  }
  return rows;
}

/// Request for frames [t - n + 1, t] of an episode; every entry after the
/// first carries the action that led to it.
nlohmann::json act_body(const Episode& ep, int t, int n) {
  nlohmann::json hist = nlohmann::json::array();
  for (int i = std::max(0, t - n + 1); i <= t; ++i) {
    nlohmann::json e{{"image", image_json(ep.observations[i].image)}};
    if (i > 0) e["prev_actions"] = nlohmann::json::array({flatten_action(ep.actions[i - 1])});
    hist.push_back(e);
  }
  return {{"instruction", ep.instruction}, {"history", hist}};
}

std::vector<sim::HistoryStep> history_of(const Episode& ep, int t, int n) {
  std::vector<sim::HistoryStep> h;
  for (int i = std::max(0, t - n + 1); i <= t; ++i)
    h.push_back({ep.observations[i].image, i > 0 ? std::optional<Action>(ep.actions[i - 1]) : std::nullopt});
  return h;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(KEYPLAN_CLI) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

/// z quantile by bisection on the normal CDF, used as an independent check on
/// the hard-coded 1.96 constant.
double normal_quantile(double p) {
  double lo = -10, hi = 10;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST(Config, DefaultsFileAndFlagsMergeInOrder) {
  RunConfig cfg;
  EXPECT_EQ(cfg.i32("eval.exec_k"), 2);
  std::istringstream file("# comment\n\ntrain.batch = 7\neval.trials=9\n");
  cfg.merge_stream(file, "f.cfg");
  cfg.assign("eval.trials=11");
  EXPECT_EQ(cfg.i32("train.batch"), 7);
  EXPECT_EQ(cfg.i32("eval.trials"), 11);
  EXPECT_EQ(cfg.train(Stage::Policy).batch, 7);
}

TEST(Config, UnknownKeysAndBadValues) {
  RunConfig cfg;
  EXPECT_THROW(cfg.assign("train.nope=1"), InvalidInput);
  EXPECT_THROW(cfg.assign("no_equals_sign"), InvalidInput);
  std::istringstream file("eval.trials = 3\nmystery = 4\n");
  try {
    cfg.merge_stream(file, "x.cfg");
    FAIL();
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg line 2"), std::string::npos);
  }
  cfg.set("eval.trials", "many");
  EXPECT_THROW(cfg.i32("eval.trials"), InvalidInput);
  cfg.set("train.lr", "inf");
  EXPECT_THROW(cfg.real("train.lr"), InvalidInput);
  cfg.set("experiment.history_values", "2,x");
  EXPECT_THROW(cfg.int_list("experiment.history_values"), InvalidInput);
}

TEST(Config, EchoReloadsToSameHash) {
  RunConfig a;
  a.assign("train.lr=0.01");
  std::istringstream echo(a.echo());
  RunConfig b;
  b.merge_stream(echo, "echo");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.echo(), b.echo());
  EXPECT_NE(a.hash(), RunConfig().hash());
}

TEST(Config, EveryModuleBuilderReadsDefaults) {
  RunConfig cfg;
  EXPECT_NO_THROW(cfg.extractor().validate());
  EXPECT_NO_THROW(cfg.build().validate());
  EXPECT_NO_THROW(cfg.model(1796).validate());
  EXPECT_NO_THROW(cfg.train(Stage::Planner).validate());
  EXPECT_EQ(cfg.codecs().action.vocab, 1024);
  EXPECT_EQ(cfg.sim().height, 32);
}

TEST(Wilson, MatchesClosedFormWithIndependentZ) {
  const double z = normal_quantile(0.975);
  EXPECT_NEAR(z, 1.959963984540054, 1e-9);
  for (auto [s, n] : std::vector<std::pair<int, int>>{{0, 50}, {35, 50}, {50, 50}, {1, 3}, {120, 200}}) {
    const auto ci = wilson_interval(s, n);
    // Endpoints solve |p - phat| = z sqrt(p (1 - p) / n) for p.
    const double phat = static_cast<double>(s) / n;
    for (double p : {ci.low, ci.high}) {
      if (p <= 0.0 || p >= 1.0) continue;
      EXPECT_NEAR(std::abs(p - phat), z * std::sqrt(p * (1 - p) / n), 1e-9);
    }
    EXPECT_LE(ci.low, phat);
    EXPECT_GE(ci.high, phat);
  }
  EXPECT_DOUBLE_EQ(wilson_interval(0, 10).low, 0.0);
  EXPECT_DOUBLE_EQ(wilson_interval(10, 10).high, 1.0);
  EXPECT_THROW(wilson_interval(11, 10), InvalidInput);
}

TEST(Report, CsvRoundTripAndIncompleteFlag) {
  fixtures::TempDir dir("rep");
  MetricsReport rep;
  rep.title = "sweep";
  rep.notes.push_back("threshold 0.6");
  rep.add_success("r1", "history", "L=2", 7, 30, 50, "70.8");
  rep.add_value("r2", "efficiency", "from-scratch", 7, "steps_to_threshold", ">budget", "12k/50k");
  rep.add_value("r3", "x", "a,b \"q\"", 1, "m", "1");
  rep.complete = false;
  write_report_csv(dir.file("r.csv"), rep);
  const auto text = fixtures::slurp(dir.file("r.csv"));
  EXPECT_NE(text.find("# status: incomplete"), std::string::npos);
  EXPECT_NE(text.find(kReportHeader), std::string::npos);
  const auto back = read_report_csv(dir.file("r.csv"));
  ASSERT_EQ(back.rows.size(), 3u);
  EXPECT_FALSE(back.complete);
  EXPECT_EQ(back.rows[0].value, "0.6000");
  ASSERT_TRUE(back.rows[0].ci.has_value());
  EXPECT_NEAR(back.rows[0].ci->low, wilson_interval(30, 50).low, 1e-4);
  EXPECT_EQ(back.rows[1].value, ">budget");
  EXPECT_EQ(back.rows[2].arm, "a,b \"q\"");
  EXPECT_EQ(back.rows[0].seed, 7u);
}

TEST(Report, LossCurvesAndSvg) {
  fixtures::TempDir dir("rep");
  {
    std::ofstream o(dir.file("metrics.jsonl"));
    o << metric_json({10, Stage::Planner, 2.0}, "a") << "\n"
      << metric_json({20, Stage::Planner, 1.0}, "a") << "\n"
      << metric_json({10, Stage::Policy, 3.0}, "a") << "\n";
  }
  const auto curves = read_loss_curves(dir.file("metrics.jsonl"));
  ASSERT_EQ(curves.size(), 2u);
  EXPECT_EQ(curves[0].points.size(), 2u);
  const auto svg = loss_plot_svg(curves, "loss <a&b>");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("&lt;a&amp;b&gt;"), std::string::npos);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  MetricsReport rep;
  rep.add_success("r", "e", "x", 0, 3, 4);
  EXPECT_EQ(success_bars(rep).size(), 1u);
  EXPECT_NE(bar_plot_svg(success_bars(rep), "s").find("<rect"), std::string::npos);
}

TEST(Request, FieldPathsInErrors) {
  const ServeLimits lim;
  auto path_of = [&](const std::string& body) {
    try {
      parse_act_request(body, 3, lim);
    } catch (const RequestError& e) {
      return e.path();
    }
    return std::string("<accepted>");
  };
  EXPECT_EQ(path_of("not json"), "$");
  EXPECT_EQ(path_of("[]"), "$");
  EXPECT_EQ(path_of(R"({"history":[]})"), "instruction");
  EXPECT_EQ(path_of(R"({"instruction":"x","history":[]})"), "history");
  EXPECT_EQ(path_of(R"({"instruction":"x","history":[{"image":[[1,2]]},{"nope":1}]})"), "history[1].image");
  EXPECT_EQ(path_of(R"({"instruction":"x","history":[{"image":[[1,2],[3]]}]})"), "history[0].image[1]");
  EXPECT_EQ(path_of(R"({"instruction":"x","history":[{"image":[[1,300]]}]})"), "history[0].image[0][1]");
  EXPECT_EQ(path_of(R"({"instruction":"x","history":[{"image":[[1]]},{"image":[[1]],"prev_actions":[[0,0]]}]})"),
            "history[1].prev_actions[0]");
  EXPECT_EQ(path_of(R"({"instruction":"x","history":[{"image":[[1]]},{"image":[[1,1]]}]})"), "history[1].image");
  EXPECT_EQ(path_of(R"({"instruction":"x","history":[{"image":[[1]]}]})"), "<accepted>");
}

TEST(Request, OversizeImageAndHistoryRejected) {
  ServeLimits lim;
  lim.max_image_side = 8;
  lim.max_history = 2;
  nlohmann::json big{{"instruction", "x"}, {"history", {{{"image", image_json(Image(16, 8, 1))}}}}};
  EXPECT_THROW(parse_act_request(big.dump(), 3, lim), RequestError);
  nlohmann::json many{{"instruction", "x"}, {"history", nlohmann::json::array()}};
  for (int i = 0; i < 3; ++i) many["history"].push_back({{"image", image_json(Image(8, 8, 1))}});
  EXPECT_THROW(parse_act_request(many.dump(), 3, lim), RequestError);
}

TEST(Service, HealthReportsHashes) {
  const auto& s = served();
  PolicyService svc(s.model, s.ts, 2, "cfg123");
  const auto r = svc.health();
  EXPECT_EQ(r.status, 200);
  const auto j = nlohmann::json::parse(r.body);
  EXPECT_EQ(j["model_hash"], hex64(s.model.hash()));
  EXPECT_EQ(j["codec_hash"], s.ts.hash());
  EXPECT_EQ(j["config_hash"], "cfg123");
  EXPECT_EQ(j["horizon"], s.ts.action().horizon());
}

TEST(Service, ActMatchesOfflinePolicyStep) {
  const auto& s = served();
  PolicyService svc(s.model, s.ts, 2);
  const auto& ep = s.runs[0].episode;
  for (int t : {0, 4, 11}) {
    const auto r = svc.act(act_body(ep, t, 2).dump());
    ASSERT_EQ(r.status, 200) << r.body;
    const auto offline = policy_step<float>(s.model, s.ts, ep.instruction, history_of(ep, t, 2), 2);
    const auto j = nlohmann::json::parse(r.body);
    EXPECT_EQ(j["actions"].dump(), actions_json(offline.actions).dump());
    EXPECT_EQ(j["tokens"].get<std::vector<int>>(), offline.tokens);
  }
}

TEST(Service, BadRequestsReturn400WithPath) {
  const auto& s = served();
  PolicyService svc(s.model, s.ts, 2);
  auto body = act_body(s.runs[0].episode, 3, 2);
  body["history"][1].erase("prev_actions");
  const auto r = svc.act(body.dump());
  EXPECT_EQ(r.status, 400);
  EXPECT_EQ(nlohmann::json::parse(r.body)["path"], "history");
  const auto r2 = svc.act(R"({"instruction":5})");
  EXPECT_EQ(r2.status, 400);
  EXPECT_EQ(nlohmann::json::parse(r2.body)["path"], "instruction");
}

TEST(Service, PortOverrideFromEnvironment) {
  ::unsetenv("KEYPLAN_SERVE_PORT");
  EXPECT_EQ(resolve_port(8080), 8080);
  ::setenv("KEYPLAN_SERVE_PORT", "9001", 1);
  EXPECT_EQ(resolve_port(8080), 9001);
  ::setenv("KEYPLAN_SERVE_PORT", "90x", 1);
  EXPECT_THROW(resolve_port(8080), InvalidInput);
  ::unsetenv("KEYPLAN_SERVE_PORT");
}

TEST(Cli, ExitCodes) {
  fixtures::TempDir dir("cli");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("gen-data --bogus-flag"), 2);
  EXPECT_EQ(run_cli("extract"), 2);
  EXPECT_EQ(run_cli("extract --in " + dir.file("missing.jsonl") + " --run-dir " + dir.file("r")), 2);
  EXPECT_EQ(run_cli("gen-data --set nope=1 --run-dir " + dir.file("r")), 2);
  EXPECT_EQ(run_cli("gen-data -c " + dir.file("nope.cfg") + " --run-dir " + dir.file("r")), 2);
  {
    std::ofstream o(dir.file("bad.jsonl"));
    o << "{broken\n";
  }
  EXPECT_EQ(run_cli("extract --in " + dir.file("bad.jsonl") + " --run-dir " + dir.file("r")), 1);
}

TEST(Cli, StagesChainThroughFiles) {
  fixtures::TempDir dir("chain");
  const std::string rd = " --run-dir " + dir.file("run");
  const std::string small = " --set data.episodes=4 --set codec.vision_k=16 --set train.stage1_steps=3"
                            " --set train.stage2_steps=3 --set train.batch=2 --set model.d_model=16"
                            " --set eval.trials=1";
  const auto f = [&](const std::string& n) { return dir.file(n); };
  ASSERT_EQ(run_cli("gen-data --out " + f("eps.jsonl") + " --events " + f("ev.jsonl") + small + rd), 0);
  ASSERT_EQ(run_cli("extract --in " + f("eps.jsonl") + " --out " + f("k.csv") + small + rd), 0);
  ASSERT_EQ(run_cli("filter --in " + f("k.csv") + " --episodes " + f("eps.jsonl") + " --out " + f("kf.csv") + small + rd), 0);
  ASSERT_EQ(run_cli("fit-codecs --in " + f("eps.jsonl") + " --out " + f("c.bin") + small + rd), 0);
  ASSERT_EQ(run_cli("tokenize --in " + f("eps.jsonl") + " --codecs " + f("c.bin") + " --out " + f("t.jsonl") + small + rd), 0);
  ASSERT_EQ(run_cli("build-seq --episodes " + f("eps.jsonl") + " --keysteps " + f("kf.csv") + " --codecs " + f("c.bin") +
                    " --stage planner --out " + f("p.jsonl") + small + rd),
            0);
  ASSERT_EQ(run_cli("build-seq --episodes " + f("eps.jsonl") + " --codecs " + f("c.bin") + " --stage policy --out " +
                    f("a.jsonl") + small + rd),
            0);
  ASSERT_EQ(run_cli("train --seq " + f("p.jsonl") + " --codecs " + f("c.bin") + " --stage planner --out " + f("m1.ckpt") +
                    small + rd),
            0);
  ASSERT_EQ(run_cli("train --seq " + f("a.jsonl") + " --codecs " + f("c.bin") + " --stage policy --init " + f("m1.ckpt") +
                    " --out " + f("m2.ckpt") + small + rd),
            0);
  ASSERT_EQ(run_cli("rollout --checkpoint " + f("m1.ckpt") + " --codecs " + f("c.bin") + " --seq " + f("p.jsonl") +
                    " --out " + f("roll.jsonl") + small + rd),
            0);
  ASSERT_EQ(run_cli("eval --checkpoint " + f("m2.ckpt") + " --codecs " + f("c.bin") + small + rd), 0);
  ASSERT_EQ(run_cli("report" + rd), 0);
  EXPECT_TRUE(std::filesystem::exists(f("run/config.echo")));
  EXPECT_TRUE(std::filesystem::exists(f("run/report.csv")));
  EXPECT_TRUE(std::filesystem::exists(f("run/plots/loss.svg")));
  EXPECT_NE(fixtures::slurp(f("run/config.echo")).find("data.episodes=4"), std::string::npos);
}

// An httplib probe server would keep its SO_REUSEPORT socket listening and
// swallow some of the connections meant for the child.
static int free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  socklen_t len = sizeof addr;
  if (fd < 0 || ::bind(fd, reinterpret_cast<sockaddr*>(&addr), len) != 0 ||
      ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0)
    throw std::runtime_error("cannot reserve a port");
  ::close(fd);
  return ntohs(addr.sin_port);
}

TEST(Cli, ServeAnswersHealthAndAct) {
  fixtures::TempDir dir("serve");
  const auto& s = served();
  save_checkpoint(dir.file("m.ckpt"), s.model, {2, 0});
  s.ts.save_file(dir.file("c.bin"));

  const int port = free_port();
  const std::string port_env = "KEYPLAN_SERVE_PORT=" + std::to_string(port);
  std::vector<std::string> args{KEYPLAN_CLI, "serve", "--checkpoint", dir.file("m.ckpt"), "--codecs",
                                dir.file("c.bin"), "--run-dir", dir.file("run"), "--set", "build.history=2"};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  std::vector<std::string> env_store{port_env};
  for (char** e = environ; *e; ++e)
    if (std::string(*e).rfind("KEYPLAN_SERVE_PORT=", 0) != 0) env_store.emplace_back(*e);
  std::vector<char*> envp;
  for (auto& e : env_store) envp.push_back(e.data());
  envp.push_back(nullptr);
  pid_t pid = 0;
  ASSERT_EQ(posix_spawn(&pid, KEYPLAN_CLI, nullptr, nullptr, argv.data(), envp.data()), 0);
  struct Reaper {
    pid_t pid;
    ~Reaper() {
      ::kill(pid, SIGKILL);
      int status = 0;
      ::waitpid(pid, &status, 0);
    }
  } reaper{pid};

  httplib::Client cli("127.0.0.1", port);
  httplib::Result health;
  for (int i = 0; i < 300 && !(health = cli.Get("/health")); ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  ASSERT_TRUE(health);
  EXPECT_EQ(nlohmann::json::parse(health->body)["model_hash"], hex64(s.model.hash()));

  const auto& ep = s.runs[1].episode;
  auto res = cli.Post("/act", act_body(ep, 5, 2).dump(), "application/json");
  ASSERT_TRUE(res) << httplib::to_string(res.error());
  EXPECT_EQ(res->status, 200);
  const auto j = nlohmann::json::parse(res->body);
  EXPECT_EQ(j["actions"].size(), static_cast<std::size_t>(s.ts.action().horizon()));
  const auto offline = policy_step<float>(s.model, s.ts, ep.instruction, history_of(ep, 5, 2), 2);
  EXPECT_EQ(j["actions"].dump(), actions_json(offline.actions).dump());

  auto bad = cli.Post("/act", R"({"instruction":"x"})", "application/json");
  ASSERT_TRUE(bad) << httplib::to_string(bad.error());
  EXPECT_EQ(bad->status, 400);

}
