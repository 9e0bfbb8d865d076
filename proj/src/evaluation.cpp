#include "ageflow/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace ageflow {

TranslateMode parse_mode(std::string_view name) {
  if (name == "ictm") return TranslateMode::Ictm;
  if (name == "ictm-inverse") return TranslateMode::IctmInverse;
  if (name == "glow-manip") return TranslateMode::GlowManip;
  if (name == "glow-attr-manip") return TranslateMode::GlowAttrManip;
  throw Fault("unknown translation mode '" + std::string(name) +
              "' (expected ictm, ictm-inverse, glow-manip or glow-attr-manip)");
}

std::string mode_name(TranslateMode mode) {
  switch (mode) {
    case TranslateMode::Ictm: return "ictm";
    case TranslateMode::IctmInverse: return "ictm-inverse";
    case TranslateMode::GlowManip: return "glow-manip";
    case TranslateMode::GlowAttrManip: return "glow-attr-manip";
  }
  return "?";
}

Pipeline Pipeline::from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.has_prefix("glow/")) throw Fault("checkpoint has no GLOW weights (run `train glow`)");
  Pipeline p;
  p.glow = restore_glow(ckpt);
  if (ckpt.contains("proto/meta")) p.prototypes = restore_prototypes(ckpt);
  if (ckpt.has_prefix("ictm/")) p.stage2 = restore_stage2(ckpt);
  if (ckpt.contains("meta/train")) {
    const auto t = ckpt.get_vector("meta/train");
    if (!t.empty()) p.s = t.back();
  }
  return p;
}

void Pipeline::require(TranslateMode mode) const {
  switch (mode) {
    case TranslateMode::Ictm:
    case TranslateMode::IctmInverse:
      if (!stage2) throw Fault("mode " + mode_name(mode) + " needs ICTM weights; checkpoint has none (run `train ictm`)");
      break;
    case TranslateMode::GlowManip:
    case TranslateMode::GlowAttrManip:
      if (!prototypes) throw Fault("mode " + mode_name(mode) + " needs prototypes; checkpoint has none (run `prototypes`)");
      prototypes->require_complete();
      break;
  }
}

namespace {

// Count-weighted mean of a group's attribute cells.
Tensor<float> group_prototype(const PrototypeTable<float>& t, int g) {
  Tensor<double> acc(t.latent_shape());
  int total = 0;
  for (int a = 0; a < t.attributes(); ++a) {
    const int n = t.count(g, a);
    if (n == 0) continue;
    const Tensor<float>& p = t.at(g, a);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(p[i]) * n;
    total += n;
  }
  if (total == 0) throw Fault("no prototypes for group " + std::to_string(g));
  Tensor<float> out(t.latent_shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] / total);
  return out;
}

void check_labels(const std::vector<int>& v, std::size_t n, int limit, const char* what) {
  if (v.size() != n) throw Fault(std::string("translate: expected ") + std::to_string(n) + " " + what);
  for (int x : v)
    if (x < 0 || x >= limit) throw Fault(std::string("translate: ") + what + " label " + std::to_string(x) + " out of range");
}

int nearest_group(const PriorGenerator<float>& prior, const ConditionGaussian<float>& rec, int n, int groups) {
  std::vector<int> all(groups);
  for (int g = 0; g < groups; ++g) all[g] = g;
  const ConditionGaussian<float> ref = prior.generate(one_hot<float>(all, groups));
  const int C = rec.mu.dim(1);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int g = 0; g < groups; ++g) {
    double d = 0;
    for (int c = 0; c < C; ++c) {
      const double a = rec.mu[n * C + c] - ref.mu[g * C + c];
      const double b = rec.log_sigma[n * C + c] - ref.log_sigma[g * C + c];
      d += a * a + b * b;
    }
    if (d < best_d) {
      best_d = d;
      best = g;
    }
  }
  return best;
}

}  // namespace

TranslateBatch translate_batch(const Pipeline& p, const Tensor<float>& x, TranslateMode mode,
                               const TranslateOptions& o) {
  p.require(mode);
  const int N = x.dim(0);
  check_labels(o.targets, N, toy::kGroups, "targets");
  const double s = o.s.value_or(p.s);
  const Tensor<float> z = pack_latent(p.glow.encode(x));
  const Shape& packed = p.glow.config().packed_shape();
  const std::size_t per = shape_numel(packed);

  TranslateBatch out;
  Tensor<float> z_out;
  if (mode == TranslateMode::Ictm || mode == TranslateMode::IctmInverse) {
    const Stage2Models& m = *p.stage2;
    const int groups = m.ictm.config().groups;
    const ConditionGaussian<float> cond = m.prior.generate(one_hot<float>(o.targets, groups));
    Tensor<float> u;
    if (mode == TranslateMode::IctmInverse && o.condition_channels) {
      const Tensor<float>& cc = *o.condition_channels;
      const int Cz = packed[0], Cc = cc.dim(1);
      if (cc.dim(0) != N || cc.dim(2) != packed[1] || cc.dim(3) != packed[2] || Cc != 2 * m.ictm.config().cond_channels) {
        throw Fault("translate: condition channels " + shape_string(cc.shape()) + " do not match the model");
      }
      u = Tensor<float>({N, Cz + Cc, packed[1], packed[2]});
      const std::size_t P = static_cast<std::size_t>(packed[1]) * packed[2];
      for (int n = 0; n < N; ++n) {
        std::copy_n(z.data() + n * per, per, u.data() + n * (Cz + Cc) * P);
        std::copy_n(cc.data() + n * Cc * P, Cc * P, u.data() + (n * (Cz + Cc) + Cz) * P);
      }
    } else {
      u = m.ictm.combine(z, cond);
    }
    const Tensor<float> v = mode == TranslateMode::Ictm ? m.ictm.forward_combined(u) : m.ictm.inverse_combined(u);
    auto [zt, rec] = m.ictm.separate(v);
    const int Cz = packed[0], C = v.dim(1), Cc = C - Cz;
    const std::size_t P = static_cast<std::size_t>(packed[1]) * packed[2];
    out.condition_channels = Tensor<float>({N, Cc, packed[1], packed[2]});
    for (int n = 0; n < N; ++n) std::copy_n(v.data() + (n * C + Cz) * P, Cc * P, out.condition_channels.data() + n * Cc * P);
    for (int n = 0; n < N; ++n) out.recovered_group.push_back(nearest_group(m.prior, rec, n, groups));
    out.recovered = std::move(rec);
    z_out = std::move(zt);
  } else {
    check_labels(o.sources, N, toy::kGroups, "sources");
    const PrototypeTable<float>& t = *p.prototypes;
    z_out = z;
    for (int n = 0; n < N; ++n) {
      Tensor<float> pos, neg;
      if (mode == TranslateMode::GlowManip) {
        pos = group_prototype(t, o.targets[n]);
        neg = group_prototype(t, o.sources[n]);
      } else {
        check_labels(o.attrs, N, toy::kAttrs, "attributes");
        pos = t.at(o.targets[n], o.attrs[n]);
        neg = t.at(o.sources[n], o.attrs[n]);
      }
      float* zn = z_out.data() + n * per;
      for (std::size_t i = 0; i < per; ++i) zn[i] = static_cast<float>(zn[i] + s * (pos[i] - neg[i]));
    }
    out.recovered_group = o.sources;
  }
  out.x = p.glow.decode(unpack_latent(z_out, p.glow.config()));
  return out;
}

TranslatedImage translate_image(const Pipeline& p, const toy::Image& image, int target, TranslateMode mode, int source,
                                int attr, std::optional<double> s) {
  TranslateOptions o;
  o.targets = {target};
  o.sources = {source >= 0 ? source : toy::oracle_age(image)};
  o.attrs = {attr >= 0 ? attr : toy::oracle_attr(image)};
  o.s = s;
  const Tensor<float> x = preprocess_midpoint(toy::to_tensor<float>({&image}), p.glow.config().bins);
  TranslateBatch b = translate_batch(p, x, mode, o);
  return {toy::from_tensor(postprocess(b.x, p.glow.config().bins)), b.recovered_group[0]};
}

// ------------------------------------------------------------------ report

double PairStats::age_accuracy() const { return count ? 100.0 * age_hits / count : 0.0; }
double PairStats::attr_preservation() const { return count ? 100.0 * attr_hits / count : 0.0; }
double PairStats::centroid_displacement() const {
  const int n = count - faults;
  return n > 0 ? centroid_sum / n : std::numeric_limits<double>::quiet_NaN();
}
double PairStats::cosine() const { return count ? cosine_sum / count : 0.0; }

namespace {

template <typename F>
double mean_over(const std::vector<PairStats>& pairs, F f) {
  double acc = 0;
  int n = 0;
  for (const auto& p : pairs) {
    const double v = f(p);
    if (std::isnan(v)) continue;
    acc += v;
    ++n;
  }
  return n ? acc / n : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

double EvalReport::age_accuracy() const { return mean_over(pairs, [](const PairStats& p) { return p.age_accuracy(); }); }
double EvalReport::attr_preservation() const {
  return mean_over(pairs, [](const PairStats& p) { return p.attr_preservation(); });
}
double EvalReport::centroid_displacement() const {
  return mean_over(pairs, [](const PairStats& p) { return p.centroid_displacement(); });
}
double EvalReport::cosine() const { return mean_over(pairs, [](const PairStats& p) { return p.cosine(); }); }
int EvalReport::total() const {
  int n = 0;
  for (const auto& p : pairs) n += p.count;
  return n;
}

std::string EvalReport::csv() const {
  std::ostringstream out;
  out << "mode,source,target,count,age_accuracy,attr_preservation,centroid_px,cosine,faults\n";
  char buf[256];
  for (const auto& p : pairs) {
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.4f,%.4f,%.6f,%.6f,%d\n", mode.c_str(), p.source, p.target, p.count,
                  p.age_accuracy(), p.attr_preservation(), p.centroid_displacement(), p.cosine(), p.faults);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%s,all,all,%d,%.4f,%.4f,%.6f,%.6f,\n", mode.c_str(), total(), age_accuracy(),
                attr_preservation(), centroid_displacement(), cosine());
  out << buf;
  return out.str();
}

std::string EvalReport::table() const {
  std::ostringstream out;
  char buf[128];
  auto block = [&](const char* title, const char* fmt, auto metric) {
    out << title << '\n';
    std::snprintf(buf, sizeof buf, "%-12s", "source\\to");
    out << buf;
    for (int t = 0; t < toy::kGroups; ++t) {
      std::snprintf(buf, sizeof buf, "%10s", ("g" + std::to_string(t)).c_str());
      out << buf;
    }
    out << '\n';
    for (int s = 0; s < toy::kGroups; ++s) {
      std::snprintf(buf, sizeof buf, "%-12s", ("g" + std::to_string(s)).c_str());
      out << buf;
      for (int t = 0; t < toy::kGroups; ++t) {
        const PairStats* hit = nullptr;
        for (const auto& p : pairs)
          if (p.source == s && p.target == t) hit = &p;
        if (hit) {
          std::snprintf(buf, sizeof buf, fmt, metric(*hit));
        } else {
          std::snprintf(buf, sizeof buf, "%10s", "-");
        }
        out << buf;
      }
      out << '\n';
    }
    out << '\n';
  };
  out << "mode: " << mode << "   samples: " << total() << "\n\n";
  block("age accuracy (%)", "%10.2f", [](const PairStats& p) { return p.age_accuracy(); });
  block("attribute preservation (%)", "%10.2f", [](const PairStats& p) { return p.attr_preservation(); });
  block("centroid displacement (px)", "%10.3f", [](const PairStats& p) { return p.centroid_displacement(); });
  block("pixel cosine similarity", "%10.4f", [](const PairStats& p) { return p.cosine(); });
  std::snprintf(buf, sizeof buf, "mean over pairs: age %.2f%%  attribute %.2f%%  centroid %.3f px  cosine %.4f\n",
                age_accuracy(), attr_preservation(), centroid_displacement(), cosine());
  out << buf;
  return out.str();
}

EvalReport evaluate(const std::vector<toy::ToySample>& test, const Translator& translator, const std::string& label,
                    int batch) {
  if (test.empty()) throw Fault("evaluate: empty test split");
  struct Request {
    int sample, target;
  };
  std::vector<Request> requests;
  for (int i = 0; i < static_cast<int>(test.size()); ++i)
    for (int t = 0; t < toy::kGroups; ++t)
      if (t != test[i].g) requests.push_back({i, t});

  struct Outcome {
    bool fault = false;
    bool age = false, attr = false;
    double centroid = 0, cosine = 0;
  };
  std::vector<Outcome> outcomes(requests.size());
  for (std::size_t start = 0; start < requests.size(); start += batch) {
    const std::size_t end = std::min(requests.size(), start + batch);
    std::vector<const toy::ToySample*> samples;
    std::vector<int> targets;
    for (std::size_t r = start; r < end; ++r) {
      samples.push_back(&test[requests[r].sample]);
      targets.push_back(requests[r].target);
    }
    const std::vector<toy::Image> images = translator(samples, targets);
    if (images.size() != samples.size()) throw Fault("evaluate: translator returned the wrong number of images");
#pragma omp parallel for schedule(static)
    for (std::size_t r = start; r < end; ++r) {
      const toy::ToySample& in = *samples[r - start];
      const toy::Image& img = images[r - start];
      Outcome& o = outcomes[r];
      double dot = 0, na = 0, nb = 0;
      for (std::size_t i = 0; i < img.size(); ++i) {
        dot += double(in.image[i]) * img[i];
        na += double(in.image[i]) * in.image[i];
        nb += double(img[i]) * img[i];
      }
      o.cosine = na > 0 && nb > 0 ? dot / std::sqrt(na * nb) : 0.0;
      try {
        const toy::Centroid c_out = toy::oracle_center(img);
        const toy::Centroid c_in = toy::oracle_center(in.image);
        o.centroid = std::hypot(c_out.x - c_in.x, c_out.y - c_in.y);
        o.age = toy::oracle_age(img) == requests[r].target;
        o.attr = toy::oracle_attr(img) == in.a;
      } catch (const Fault&) {
        o.fault = true;
      }
    }
  }

  EvalReport report;
  report.mode = label;
  for (int s = 0; s < toy::kGroups; ++s)
    for (int t = 0; t < toy::kGroups; ++t)
      if (s != t) report.pairs.push_back({s, t});
  for (std::size_t r = 0; r < requests.size(); ++r) {
    const int s = test[requests[r].sample].g, t = requests[r].target;
    PairStats& p = report.pairs[s * (toy::kGroups - 1) + (t < s ? t : t - 1)];
    const Outcome& o = outcomes[r];
    ++p.count;
    p.cosine_sum += o.cosine;
    if (o.fault) {
      ++p.faults;
      continue;
    }
    p.age_hits += o.age;
    p.attr_hits += o.attr;
    p.centroid_sum += o.centroid;
  }
  std::erase_if(report.pairs, [](const PairStats& p) { return p.count == 0; });
  return report;
}

EvalReport evaluate(const Pipeline& pipeline, const std::vector<toy::ToySample>& test, TranslateMode mode, int batch) {
  pipeline.require(mode);
  const int bins = pipeline.glow.config().bins;
  Translator f = [&](const std::vector<const toy::ToySample*>& samples, const std::vector<int>& targets) {
    TranslateOptions o;
    o.targets = targets;
    std::vector<const toy::Image*> images;
    for (const auto* s : samples) {
      images.push_back(&s->image);
      o.sources.push_back(s->g);
      o.attrs.push_back(s->a);
    }
    const Tensor<float> x = preprocess_midpoint(toy::to_tensor<float>(images), bins);
    const Tensor<float> px = postprocess(translate_batch(pipeline, x, mode, o).x, bins);
    std::vector<toy::Image> out;
    for (std::size_t n = 0; n < samples.size(); ++n) out.push_back(toy::from_tensor(px, n * toy::kSize * toy::kSize));
    return out;
  };
  return evaluate(test, f, mode_name(mode), batch);
}

}  // namespace ageflow
