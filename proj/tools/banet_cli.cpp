// banet: phantom generation, training, inference, evaluation and gradient
// checks from the command line.
//
// Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <cstdio>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "banet/config_json.hpp"
#include "banet/gradcheck.hpp"
#include "banet/inference.hpp"
#include "banet/phantom.hpp"
#include "banet/training.hpp"

namespace fs = std::filesystem;
using namespace banet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string case_name(int i) {
  std::ostringstream s;
  s << "case_" << std::setw(3) << std::setfill('0') << i;
  return s.str();
}

int cmd_gen(const fs::path& config_path, const fs::path& out, int count) {
  phantom::PhantomConfig cfg;
  if (!config_path.empty()) cfg = config::phantom_config_from_json(config::read_text_file(config_path));
  fs::create_directories(out);
  for (int i = 0; i < count; ++i) {
    phantom::PhantomConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(i);
    const auto ph = phantom::generate_phantom(c);
    io::write_volume(ph.image, out / (case_name(i) + "_image.json"));
    io::write_volume(ph.labels, out / (case_name(i) + "_label.json"));
  }
  std::cout << "wrote " << count << " phantom pairs to " << out.string() << "\n";
  return kExitOk;
}

int cmd_train(const fs::path& data_dir, const fs::path& net_json, const fs::path& train_json,
              const fs::path& out, fs::path trace, std::uint64_t net_seed, bool quiet) {
  arch::NetworkConfig ncfg;
  if (!net_json.empty()) ncfg = config::network_config_from_json(config::read_text_file(net_json));
  train::TrainConfig tcfg;
  if (!train_json.empty()) tcfg = config::train_config_from_json(config::read_text_file(train_json));

  ensure_parent(out);
  const auto data = train::preprocess_dataset(train::load_dataset(data_dir));
  auto net = arch::BaNet<float>::build(ncfg, net_seed);
  train::TrainHooks hooks;
  if (!quiet)
    hooks.on_epoch = [&](const train::EpochRecord& r) {
      std::cout << "epoch " << r.epoch << "  loss " << r.mean_loss << "  lr " << r.lr << "\n";
    };
  const auto result = train::train(net, data, tcfg, hooks);
  train::save_checkpoint(result.checkpoint, out);
  if (trace.empty()) trace = train::checkpoint_stem(out).string() + "_trace.csv";
  ensure_parent(trace);
  train::write_loss_trace(result.trace, trace);
  std::cout << "checkpoint " << train::checkpoint_stem(out).string() << ".ckpt.json, trace "
            << trace.string() << "\n";
  return kExitOk;
}

int cmd_infer(const std::vector<std::string>& ckpts, const fs::path& in, const fs::path& out,
              double overlap, const fs::path& probs, const fs::path& midslice) {
  const io::Volume image = io::preprocess(io::read_image(in));
  std::vector<infer::Prediction> preds;
  for (const auto& c : ckpts) {
    const auto ckpt = train::load_checkpoint(c);
    const auto net = train::network_from_checkpoint(ckpt);
    preds.push_back(infer::sliding_window_predict(net, image, ckpt.train.patch_dims, overlap));
  }
  const infer::Prediction pred = infer::ensemble(preds);
  ensure_parent(out);
  if (!probs.empty()) ensure_parent(probs);
  if (!midslice.empty()) ensure_parent(midslice);
  std::optional<fs::path> probs_path;
  if (!probs.empty()) probs_path = probs;
  infer::save_prediction(pred, out, probs_path);
  if (!midslice.empty()) infer::write_midslice_pgm(pred.labels, midslice);
  std::cout << "prediction " << io::header_path(out).string() << " from " << ckpts.size()
            << " checkpoint(s)\n";
  return kExitOk;
}

fs::path find_prediction(const fs::path& dir, const std::string& name) {
  for (const std::string& candidate : {name + ".json", name + "_pred.json", name + "_label.json"})
    if (fs::exists(dir / candidate)) return dir / candidate;
  throw DataError("no prediction for case " + name + " in " + dir.string());
}

int cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir, const fs::path& report) {
  const std::string suffix = "_label.json";
  std::vector<std::string> names;
  if (!fs::is_directory(gt_dir)) throw DataError("ground-truth directory " + gt_dir.string() + " not found");
  for (const auto& e : fs::directory_iterator(gt_dir)) {
    const std::string f = e.path().filename().string();
    if (f.size() > suffix.size() && f.ends_with(suffix)) names.push_back(f.substr(0, f.size() - suffix.size()));
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError("no *_label.json volumes in " + gt_dir.string());

  ensure_parent(report);
  std::ofstream csv(report, std::ios::trunc);
  if (!csv) throw DataError("cannot write " + report.string());
  csv << std::setprecision(17) << "case,class,dice\n";
  double total = 0.0;
  for (const auto& name : names) {
    const auto gt = io::read_labels(gt_dir / (name + suffix));
    const auto pred = io::read_labels(find_prediction(pred_dir, name));
    const int k = std::max(gt.num_classes, pred.num_classes);
    const auto r = infer::dice_score(pred, gt, k);
    for (std::size_t c = 0; c < r.per_class.size(); ++c)
      csv << name << "," << c + 1 << "," << r.per_class[c] << "\n";
    csv << name << ",mean," << r.mean << "\n";
    std::cout << name << "  mean dice " << std::fixed << std::setprecision(4) << r.mean << "\n"
              << std::defaultfloat;
    total += r.mean;
  }
  const double mean = total / static_cast<double>(names.size());
  csv << "all,mean," << mean << "\n";
  std::cout << "mean dice " << std::fixed << std::setprecision(4) << mean << " over "
            << names.size() << " case(s)\n";
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  const auto results = gradcheck::run_suite(seed);
  bool ok = true;
  std::cout << std::left << std::setw(20) << "op" << std::setw(10) << "checked"
            << std::setw(10) << "skipped" << std::setw(14) << "max_rel_err" << "status\n";
  for (const auto& r : results) {
    std::cout << std::left << std::setw(20) << r.name << std::setw(10) << r.checked
              << std::setw(10) << r.skipped << std::setw(14) << std::scientific << std::setprecision(3) << r.max_rel_error
              << std::defaultfloat << (r.passed ? "PASS" : "FAIL") << "\n";
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Boundary-aware 3-D segmentation network toolkit"};
  app.require_subcommand(1);

  fs::path gen_config, gen_out;
  int gen_count = 1;
  auto* gen = app.add_subcommand("gen", "Generate synthetic phantom volumes");
  gen->add_option("--config", gen_config, "Phantom config JSON")->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of phantoms")->check(CLI::PositiveNumber);

  fs::path tr_data, tr_net, tr_cfg, tr_out, tr_trace;
  std::uint64_t tr_seed = 0;
  bool tr_quiet = false;
  auto* trn = app.add_subcommand("train", "Train a network on a dataset directory");
  trn->add_option("--data", tr_data, "Directory with <case>_image/_label volumes")->required();
  trn->add_option("--net", tr_net, "Network config JSON")->check(CLI::ExistingFile);
  trn->add_option("--train", tr_cfg, "Training config JSON")->check(CLI::ExistingFile);
  trn->add_option("--out", tr_out, "Checkpoint path stem")->required();
  trn->add_option("--trace", tr_trace, "Loss trace CSV (default <stem>_trace.csv)");
  trn->add_option("--init-seed", tr_seed, "Parameter initialization seed (default: training seed)");
  trn->add_flag("--quiet", tr_quiet, "Do not print per-epoch losses");

  std::vector<std::string> inf_ckpts;
  fs::path inf_in, inf_out, inf_probs, inf_slice;
  double inf_overlap = 0.5;
  auto* inf = app.add_subcommand("infer", "Sliding-window prediction, ensembling checkpoints");
  inf->add_option("--ckpt", inf_ckpts, "Checkpoint(s), comma separated")->required()->delimiter(',');
  inf->add_option("--in", inf_in, "Input image volume")->required();
  inf->add_option("--out", inf_out, "Output label volume")->required();
  inf->add_option("--overlap", inf_overlap, "Window overlap fraction")->check(CLI::Range(0.0, 0.9));
  inf->add_option("--probs", inf_probs, "Also write stacked probabilities");
  inf->add_option("--dump-midslice", inf_slice, "Write the middle z slice as PGM");

  fs::path ev_pred, ev_gt, ev_report;
  auto* ev = app.add_subcommand("eval", "Dice scores of predictions against ground truth");
  ev->add_option("--pred", ev_pred, "Prediction directory")->required();
  ev->add_option("--gt", ev_gt, "Ground-truth directory")->required();
  ev->add_option("--report", ev_report, "Output CSV")->required();

  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--seed", gc_seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_config, gen_out, gen_count);
    if (*trn) {
      std::uint64_t seed = tr_seed;
      if (trn->count("--init-seed") == 0 && !tr_cfg.empty())
        seed = config::train_config_from_json(config::read_text_file(tr_cfg)).seed;
      return cmd_train(tr_data, tr_net, tr_cfg, tr_out, tr_trace, seed, tr_quiet);
    }
    if (*inf) return cmd_infer(inf_ckpts, inf_in, inf_out, inf_overlap, inf_probs, inf_slice);
    if (*ev) return cmd_eval(ev_pred, ev_gt, ev_report);
    if (*gc) return cmd_gradcheck(gc_seed);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
