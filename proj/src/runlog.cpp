#include "pckd/runlog.hpp"

#include <fstream>
#include <ostream>

namespace pckd {

using nlohmann::json;

void to_json(json& j, const StepRecord& r) {
  j = json{{"kind", "step"},         {"step", r.step},
           {"epoch", r.epoch},       {"lr", r.lr},
           {"ce", r.ce},             {"kd", r.kd},
           {"fa", r.fa},             {"ca", r.ca},
           {"cc_t", r.cc_t},         {"cc_s", r.cc_s},
           {"contrib_ce", r.contrib_ce}, {"contrib_kd", r.contrib_kd},
           {"contrib_fa", r.contrib_fa}, {"contrib_ca", r.contrib_ca},
           {"contrib_cc", r.contrib_cc}, {"total", r.total},
           {"mean_v", r.mean_v}};
}

void from_json(const json& j, StepRecord& r) {
  j.at("step").get_to(r.step);
  j.at("epoch").get_to(r.epoch);
  j.at("lr").get_to(r.lr);
  j.at("ce").get_to(r.ce);
  j.at("kd").get_to(r.kd);
  j.at("fa").get_to(r.fa);
  j.at("ca").get_to(r.ca);
  j.at("cc_t").get_to(r.cc_t);
  j.at("cc_s").get_to(r.cc_s);
  j.at("contrib_ce").get_to(r.contrib_ce);
  j.at("contrib_kd").get_to(r.contrib_kd);
  j.at("contrib_fa").get_to(r.contrib_fa);
  j.at("contrib_ca").get_to(r.contrib_ca);
  j.at("contrib_cc").get_to(r.contrib_cc);
  j.at("total").get_to(r.total);
  j.at("mean_v").get_to(r.mean_v);
}

void to_json(json& j, const EpochRecord& r) {
  j = json{{"kind", "epoch"},
           {"epoch", r.epoch},
           {"policy", std::string(policy_name(r.policy))},
           {"lambda", r.lambda},
           {"mean_v", r.mean_v},
           {"frac_easy", r.frac_easy},
           {"lr", r.lr},
           {"train_loss", r.train_loss},
           {"train_top1", r.train_top1},
           {"val_top1", r.val_top1},
           {"wall_seconds", r.wall_seconds}};
}

void from_json(const json& j, EpochRecord& r) {
  j.at("epoch").get_to(r.epoch);
  auto p = parse_policy(j.at("policy").get<std::string>());
  if (!p) throw json::other_error::create(501, "unknown policy " + j.at("policy").get<std::string>(), &j);
  r.policy = *p;
  j.at("lambda").get_to(r.lambda);
  j.at("mean_v").get_to(r.mean_v);
  j.at("frac_easy").get_to(r.frac_easy);
  j.at("lr").get_to(r.lr);
  j.at("train_loss").get_to(r.train_loss);
  j.at("train_top1").get_to(r.train_top1);
  j.at("val_top1").get_to(r.val_top1);
  j.at("wall_seconds").get_to(r.wall_seconds);
}

void to_json(json& j, const RunSummary& r) {
  j = json{{"kind", "summary"},
           {"best_val_top1", r.best_val_top1},
           {"best_epoch", r.best_epoch},
           {"final_val_top1", r.final_val_top1},
           {"test_top1", r.test_top1},
           {"test_top5", r.test_top5},
           {"steps", r.steps},
           {"wall_seconds", r.wall_seconds}};
}

void from_json(const json& j, RunSummary& r) {
  j.at("best_val_top1").get_to(r.best_val_top1);
  j.at("best_epoch").get_to(r.best_epoch);
  j.at("final_val_top1").get_to(r.final_val_top1);
  j.at("test_top1").get_to(r.test_top1);
  j.at("test_top5").get_to(r.test_top5);
  j.at("steps").get_to(r.steps);
  j.at("wall_seconds").get_to(r.wall_seconds);
}

void RunLog::emit(const json& j) {
  if (sink_) {
    *sink_ << j.dump() << '\n';
    sink_->flush();
  }
}

void RunLog::header(const json& info) {
  header_ = info;
  header_["kind"] = "header";
  header_["schema_version"] = kRunLogVersion;
  emit(header_);
}

void RunLog::step(const StepRecord& r) {
  require(steps_.empty() || r.step > steps_.back().step, "run log: step counter must increase");
  steps_.push_back(r);
  emit(json(r));
}

void RunLog::epoch(const EpochRecord& r) {
  epochs_.push_back(r);
  emit(json(r));
}

void RunLog::summary(const RunSummary& s) {
  summary_ = s;
  emit(json(s));
}

std::vector<EpochWeightStats> RunLog::weight_stats() const {
  std::vector<EpochWeightStats> out;
  for (const auto& e : epochs_) {
    EpochWeightStats s;
    s.epoch = e.epoch;
    s.policy = e.policy;
    s.count = 1;
    s.sum_v = e.mean_v;
    s.easy = e.frac_easy;
    out.push_back(s);
  }
  return out;
}

RunLog read_run_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open run log " + path.string());
  RunLog log;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "header") {
        if (j.at("schema_version").get<int>() != kRunLogVersion)
          throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": unsupported run log version " +
                               j.at("schema_version").dump());
        log.header(j);
      } else if (kind == "step") {
        log.step(j.get<StepRecord>());
      } else if (kind == "epoch") {
        log.epoch(j.get<EpochRecord>());
      } else if (kind == "summary") {
        log.summary(j.get<RunSummary>());
      } else {
        throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": unknown record kind " + kind);
      }
    } catch (const json::exception& e) {
      throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (log.header_info().empty()) throw IngestionError(path.string() + ": missing run log header");
  return log;
}

}  // namespace pckd
