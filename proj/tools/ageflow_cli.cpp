// ageflow command-line entry point. Exit codes: 0 success, 1 usage error, 2 runtime fault.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "ageflow/evaluation.hpp"

namespace fs = std::filesystem;
using namespace ageflow;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ckpt;
  std::string manifest;
  std::string input;
  std::string mode = "ictm";
  std::string split = "test";
  std::string log;
  int count = 800;
  int target = 0;
  int source = -1;
  int attr = -1;
  double temperature = 0.7;
  std::optional<double> s;
};

TrainConfig load_config(const Options& o) {
  TrainConfig c = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

std::string require(const std::string& value, const char* flag) {
  if (value.empty()) throw Fault(std::string("missing required ") + flag);
  return value;
}

fs::path log_path(const Options& o, const fs::path& out, const char* name) {
  if (!o.log.empty()) return o.log;
  return out.parent_path() / name;
}

std::vector<toy::ToySample> load_training(const TrainConfig& c, const Options& o) {
  const std::string manifest = o.manifest.empty() ? c.dataset : o.manifest;
  auto train = toy::load_split(require(manifest, "dataset manifest (--manifest or config \"dataset\")"), "train");
  if (train.empty()) throw Fault("dataset " + manifest + " has no training samples");
  return train;
}

int cmd_data_gen(const Options& o) {
  const auto m = toy::dataset_generate(o.count, o.seed.value_or(7), require(o.out, "--out"));
  int test = 0;
  for (const auto& e : m) test += e.split == "test";
  std::printf("wrote %zu images (%zu train, %d test) to %s\n", m.size(), m.size() - test, test, o.out.c_str());
  return 0;
}

int cmd_train_glow(const Options& o) {
  const TrainConfig c = load_config(o);
  const fs::path out = o.out.empty() ? fs::path(require(c.checkpoint, "--out")) : fs::path(o.out);
  const auto train = load_training(c, o);
  GlowTrainResult r = train_glow(c, train, [&](const GlowLogRow& row) {
    if (row.iter % 10 == 0) std::printf("iter %5d  nll %.4f  bpd %.4f\n", row.iter, row.loss, row.bpd);
    std::fflush(stdout);
  });
  Checkpoint ckpt;
  store_train_config(ckpt, c);
  store_glow(ckpt, r.model);
  ckpt.put_scalar("meta/glow_iteration", r.completed);
  save_checkpoint(out, ckpt);
  write_glow_log(log_path(o, out, "glow_log.csv"), r.log);
  if (!r.abort_reason.empty()) {
    std::fprintf(stderr, "training diverged at %s; saved last good checkpoint to %s\n", r.abort_reason.c_str(),
                 out.c_str());
    return 2;
  }
  std::printf("saved %s after %d iterations\n", out.c_str(), r.completed);
  return 0;
}

int cmd_prototypes(const Options& o) {
  const TrainConfig c = load_config(o);
  Checkpoint ckpt = load_checkpoint(require(o.ckpt, "--ckpt"));
  const GlowModel<float> glow = restore_glow(ckpt);
  const auto train = load_training(c, o);
  const PrototypeTable<float> table = compute_prototype_stage(glow, train);
  store_prototypes(ckpt, table);
  const std::string out = o.out.empty() ? o.ckpt : o.out;
  save_checkpoint(out, ckpt);
  for (int g = 0; g < table.groups(); ++g)
    for (int a = 0; a < table.attributes(); ++a) std::printf("cell (%d, %d): %d samples\n", g, a, table.count(g, a));
  table.require_complete();
  std::printf("saved %s\n", out.c_str());
  return 0;
}

int cmd_train_ictm(const Options& o) {
  const TrainConfig c = load_config(o);
  Checkpoint ckpt = load_checkpoint(require(o.ckpt, "--ckpt"));
  const GlowModel<float> glow = restore_glow(ckpt);
  const auto train = load_training(c, o);
  if (!ckpt.contains("proto/meta")) throw Fault("checkpoint has no prototypes (run `prototypes` first)");
  const PrototypeTable<float> table = restore_prototypes(ckpt);
  const fs::path out = o.out.empty() ? fs::path(require(c.checkpoint, "--out")) : fs::path(o.out);
  IctmTrainResult r = train_ictm(c, glow, table, train, [&](const IctmLogRow& row) {
    if (row.iter % 10 == 0) {
      std::printf("iter %5d  loss %.4f  akd %.4f  al %.4f  acl %.4f  cl %.4f  d %.4f\n", row.iter, row.loss, row.akd,
                  row.al, row.acl, row.cl, row.d_loss);
      std::fflush(stdout);
    }
  });
  ckpt.erase_prefix("ictm/");
  ckpt.erase_prefix("prior/");
  ckpt.erase_prefix("disc/");
  store_train_config(ckpt, c);
  store_stage2(ckpt, r.models);
  ckpt.put_scalar("meta/ictm_iteration", r.completed);
  save_checkpoint(out, ckpt);
  write_ictm_log(log_path(o, out, "ictm_log.csv"), r.log);
  if (!r.abort_reason.empty()) {
    std::fprintf(stderr, "training aborted at %s; saved last good checkpoint to %s\n", r.abort_reason.c_str(),
                 out.c_str());
    return 2;
  }
  std::printf("saved %s after %d iterations\n", out.c_str(), r.completed);
  return 0;
}

int cmd_translate(const Options& o) {
  const Pipeline p = Pipeline::from_checkpoint(load_checkpoint(require(o.ckpt, "--ckpt")));
  int w = 0, h = 0;
  const toy::Image in = toy::read_pgm(require(o.input, "--input"), &w, &h);
  if (w != toy::kSize || h != toy::kSize) throw Fault("input must be 32x32");
  const TranslatedImage r = translate_image(p, in, o.target, parse_mode(o.mode), o.source, o.attr, o.s);
  toy::write_pgm(require(o.out, "--out"), r.image);
  std::printf("wrote %s (target group %d, recovered source group %d)\n", o.out.c_str(), o.target, r.recovered_group);
  return 0;
}

int cmd_sample(const Options& o) {
  const Pipeline p = Pipeline::from_checkpoint(load_checkpoint(require(o.ckpt, "--ckpt")));
  Rng rng(o.seed.value_or(7));
  const Tensor<float> px = sample(p.glow, o.count, o.temperature, rng);
  const fs::path dir = require(o.out, "--out");
  fs::create_directories(dir);
  for (int n = 0; n < o.count; ++n) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%04d.pgm", n);
    toy::write_pgm(dir / name, toy::from_tensor(px, static_cast<std::size_t>(n) * toy::kSize * toy::kSize));
  }
  std::printf("wrote %d samples to %s\n", o.count, dir.c_str());
  return 0;
}

int cmd_eval(const Options& o) {
  const std::string ckpt_path = require(o.ckpt, "--ckpt");
  std::string manifest = o.manifest;
  if (manifest.empty() && !o.config.empty()) manifest = load_config(o).dataset;
  const Pipeline p = Pipeline::from_checkpoint(load_checkpoint(ckpt_path));
  const auto test = toy::load_split(require(manifest, "--manifest"), o.split);
  const EvalReport report = evaluate(p, test, parse_mode(o.mode));
  std::fputs(report.table().c_str(), stdout);
  if (!o.out.empty()) {
    std::ofstream out(o.out);
    if (!out) throw Fault("cannot write " + o.out);
    out << report.csv();
  }
  return 0;
}

int cmd_inspect(const Options& o) {
  const Checkpoint ckpt = load_checkpoint(require(o.input, "checkpoint path"));
  std::size_t total = 0;
  for (const auto& [name, t] : ckpt.tensors()) {
    std::printf("%-48s %s %s\n", name.c_str(), t.dtype == DType::F32 ? "f32" : "f64", shape_string(t.shape).c_str());
    total += t.numel();
  }
  std::printf("%zu tensors, %zu values\n", ckpt.tensors().size(), total);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ageflow: flow-based age translation on toy data"};
  app.require_subcommand(1);
  Options o;
  std::function<int(const Options&)> action;

  auto common = [&](CLI::App* cmd, bool config = true) {
    if (config) cmd->add_option("--config", o.config, "JSON config")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "random seed");
    cmd->add_option("--out", o.out, "output path");
  };

  CLI::App* data = app.add_subcommand("data", "dataset tools");
  data->require_subcommand(1);
  CLI::App* gen = data->add_subcommand("gen", "generate the toy dataset");
  common(gen, false);
  gen->add_option("--count", o.count, "number of images")->check(CLI::PositiveNumber);
  gen->callback([&] { action = cmd_data_gen; });

  CLI::App* train = app.add_subcommand("train", "training stages");
  train->require_subcommand(1);
  CLI::App* tg = train->add_subcommand("glow", "stage 1: GLOW maximum likelihood");
  common(tg);
  tg->add_option("--manifest", o.manifest, "dataset manifest (overrides config)");
  tg->add_option("--log", o.log, "loss CSV path");
  tg->callback([&] { action = cmd_train_glow; });
  CLI::App* ti = train->add_subcommand("ictm", "stage 2: ICTM with discriminator");
  common(ti);
  ti->add_option("--ckpt", o.ckpt, "checkpoint with GLOW weights and prototypes")->required();
  ti->add_option("--manifest", o.manifest, "dataset manifest (overrides config)");
  ti->add_option("--log", o.log, "loss CSV path");
  ti->callback([&] { action = cmd_train_ictm; });

  CLI::App* proto = app.add_subcommand("prototypes", "compute prototype latents");
  common(proto);
  proto->add_option("--ckpt", o.ckpt, "checkpoint with GLOW weights")->required();
  proto->add_option("--manifest", o.manifest, "dataset manifest (overrides config)");
  proto->callback([&] { action = cmd_prototypes; });

  CLI::App* tr = app.add_subcommand("translate", "translate one image");
  common(tr, false);
  tr->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  tr->add_option("--input", o.input, "input PGM")->required();
  tr->add_option("--target", o.target, "target age group")->check(CLI::Range(0, toy::kGroups - 1))->required();
  tr->add_option("--mode", o.mode, "ictm | ictm-inverse | glow-manip | glow-attr-manip");
  tr->add_option("--s", o.s, "manipulation scale");
  tr->add_option("--source", o.source, "source group (default: oracle)")->check(CLI::Range(0, toy::kGroups - 1));
  tr->add_option("--attr", o.attr, "attribute (default: oracle)")->check(CLI::Range(0, toy::kAttrs - 1));
  tr->callback([&] { action = cmd_translate; });

  CLI::App* sm = app.add_subcommand("sample", "draw images from the GLOW prior");
  common(sm, false);
  sm->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  sm->add_option("--count", o.count, "number of samples")->check(CLI::PositiveNumber);
  sm->add_option("--temperature", o.temperature, "prior temperature")->check(CLI::NonNegativeNumber);
  sm->callback([&] { action = cmd_sample; });

  CLI::App* ev = app.add_subcommand("eval", "oracle evaluation on a split");
  common(ev);
  ev->add_option("--ckpt", o.ckpt, "checkpoint");
  ev->add_option("--manifest", o.manifest, "dataset manifest");
  ev->add_option("--mode", o.mode, "ictm | ictm-inverse | glow-manip | glow-attr-manip");
  ev->add_option("--split", o.split, "train | test")->check(CLI::IsMember({"train", "test"}));
  ev->callback([&] { action = cmd_eval; });

  CLI::App* inspect = app.add_subcommand("inspect", "inspection tools");
  inspect->require_subcommand(1);
  CLI::App* ic = inspect->add_subcommand("ckpt", "list checkpoint tensors");
  ic->add_option("path", o.input, "checkpoint file")->required();
  ic->callback([&] { action = cmd_inspect; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  try {
    return action(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
