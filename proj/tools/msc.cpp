// msc: batch commands and the live service for the charged mass-spring simulator.

#include "msc/commands.hpp"
#include "msc/parallel.hpp"
#include "msc/service.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

namespace {

std::atomic<bool> g_interrupted{false};

void add_overrides(CLI::App* cmd, msc::Overrides& o) {
  cmd->add_option("--integrator", o.integrator, "imex, verlet or explicit");
  cmd->add_option("--forces", o.forces, "brute or ddef");
  cmd->add_option("--h", o.h, "time step in seconds");
  cmd->add_option("--steps", o.steps, "number of steps");
  cmd->add_option("--m", o.m, "DDEF sample count");
}

int serve(const std::string& scene_path, unsigned short port, int throttle, double max_rate, bool play) {
  msc::Scene scene = msc::load_scene(scene_path);
  for (const std::string& w : scene.warnings) std::cerr << "warning: " << w << '\n';
  msc::net::Server server(std::move(scene), port, throttle);
  server.start(max_rate);
  std::cout << "serving ws://0.0.0.0:" << server.port() << "/sim (Ctrl-C to stop)" << std::endl;
  if (play) server.submit(R"({"type":"play"})");
  std::signal(SIGINT, [](int) { g_interrupted = true; });
  std::signal(SIGTERM, [](int) { g_interrupted = true; });
  while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return msc::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Charged mass-spring simulator"};
  app.require_subcommand(1);
  app.set_help_flag("--help", "print this help and exit");
  int threads = 0;
  app.add_option("--threads", threads, "worker threads for force kernels (0 = all cores)");

  msc::Overrides o;
  std::string config, output, reference;

  auto* simulate = app.add_subcommand("simulate", "run a scene and write the trajectory and energy series");
  simulate->add_option("config", config, "scene file")->required();
  simulate->add_option("-o,--output", output, "trajectory file (.bin or .csv)")->required();
  add_overrides(simulate, o);

  msc::ValidateOptions vo;
  auto* validate = app.add_subcommand("validate", "relative energy error against a reference run");
  validate->add_option("config", config, "scene file")->required();
  validate->add_option("--reference", reference, "reference scene (default: the same scene under verlet)");
  validate->add_option("--reference-h", vo.reference_h, "reference time step when no reference scene is given");
  validate->add_option("-o,--output", output, "error series CSV")->required();
  add_overrides(validate, o);

  std::string k_range = "2:10:5", q_range = "1:6:6";
  long frame = 100;
  auto* sweep = app.add_subcommand("sweep", "error heatmap over spring stiffness and charge");
  sweep->add_option("config", config, "scene file")->required();
  sweep->add_option("--k", k_range, "stiffness range lo:hi:count in N/m");
  sweep->add_option("--q", q_range, "charge range lo:hi:count in uC");
  sweep->add_option("--frame", frame, "frame index to compare");
  sweep->add_option("--reference-h", vo.reference_h, "Verlet reference time step");
  sweep->add_option("-o,--output", output, "heatmap CSV")->required();
  add_overrides(sweep, o);

  msc::EstimateOptions eo;
  std::string target, target_config;
  double guess_uc = std::numeric_limits<double>::quiet_NaN(), guess_k = std::numeric_limits<double>::quiet_NaN();
  auto* estimate = app.add_subcommand("estimate", "recover charges or spring constants from a target trajectory");
  estimate->add_option("config", config, "scene file (initial state, guess)")->required();
  estimate->add_option("--target", target, "target trajectory (binary); its last frame is matched");
  estimate->add_option("--target-config", target_config, "scene that generates the target");
  estimate->add_option("--param", eo.param, "charges or springs");
  estimate->add_option("--group", eo.group, "vertex group whose charge is estimated");
  estimate->add_option("--guess-uC", guess_uc, "initial charge guess in uC");
  estimate->add_option("--guess-k", guess_k, "initial stiffness guess in N/m");
  estimate->add_option("--step-size", eo.optimizer.step_size, "descent step in scaled units");
  estimate->add_option("--scale", eo.optimizer.parameter_scale, "parameter scale (SI units per optimizer unit)");
  estimate->add_option("--growth", eo.optimizer.step_growth, "step multiplier after an accepted step");
  estimate->add_option("--max-iterations", eo.optimizer.max_iterations, "iteration limit");
  estimate->add_option("--loss-tolerance", eo.optimizer.loss_tolerance, "stop when the loss is below this");
  estimate->add_option("--gradient-tolerance", eo.optimizer.gradient_tolerance, "stop on a small gradient");
  estimate->add_option("--change-tolerance", eo.optimizer.relative_change_tolerance,
                       "stop on a small relative parameter change");
  estimate->add_flag("!--no-direction-term", eo.include_direction_term, "drop the spring direction term from H");
  add_overrides(estimate, o);

  std::vector<int> sizes{50, 200, 1000, 5000}, ms{100, 300, 1000, 3000};
  std::uint64_t seed = 7;
  auto* bench = app.add_subcommand("bench-ddef", "brute force vs DDEF timing and accuracy table");
  bench->add_option("--sizes", sizes, "charge counts")->delimiter(',');
  bench->add_option("--m", ms, "DDEF sample counts")->delimiter(',');
  bench->add_option("--seed", seed, "cloud seed");

  unsigned short port = 8765;
  int throttle = 1;
  double max_rate = 60.0;
  bool play = false;
  auto* srv = app.add_subcommand("serve", "live simulation over a websocket at /sim");
  srv->add_option("--scene", config, "scene file")->required();
  srv->add_option("--port", port, "TCP port (0 picks a free one)");
  srv->add_option("--throttle", throttle, "broadcast every k-th frame");
  srv->add_option("--max-rate", max_rate, "step rate cap in steps per second (0 = unlimited)");
  srv->add_flag("--play", play, "start playing instead of paused");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return msc::kExitConfig;
  }

  const auto thread_limit = msc::limit_threads(threads);
  try {
    if (*simulate) {
      msc::cmd_simulate(config, output, o, std::cout);
    } else if (*validate) {
      if (!reference.empty()) vo.reference = reference;
      msc::cmd_validate(config, vo, o, output, std::cout);
    } else if (*sweep) {
      msc::cmd_sweep(config, msc::Range::parse(k_range), msc::Range::parse(q_range), frame, vo.reference_h, o, output,
                     std::cout);
    } else if (*estimate) {
      if (!target.empty()) eo.target_trajectory = target;
      if (!target_config.empty()) eo.target_config = target_config;
      if (!std::isnan(guess_uc)) eo.guess = guess_uc * msc::kMicroCoulomb;
      if (!std::isnan(guess_k)) eo.guess = guess_k;
      msc::cmd_estimate(config, eo, o, std::cout);
    } else if (*bench) {
      msc::cmd_bench_ddef(sizes, ms, seed, std::cout);
    } else if (*srv) {
      return serve(config, port, throttle, max_rate, play);
    }
  } catch (const msc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return msc::kExitConfig;
  } catch (const msc::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return msc::kExitDivergence;
  } catch (const msc::IllConditionedError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return msc::kExitDivergence;
  } catch (const msc::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return msc::kExitIo;
  } catch (const boost::system::system_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return msc::kExitIo;
  }
  return msc::kExitOk;
}
