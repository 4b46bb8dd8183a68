#pragma once
// Persistence: model checkpoints, metrics tables, JSONL training logs.
//
// Checkpoints are plain text. Line one is a magic+version stamp, line two a
// single-line JSON header carrying the model config, the feature scaler and
// free-form metadata. Every parameter tensor follows as a "name rows cols"
// line plus one line per row of %a hexfloats, which round-trip bitwise.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfseq/data.hpp"
#include "cfseq/metrics.hpp"
#include "cfseq/model.hpp"
#include "cfseq/msm.hpp"
#include "cfseq/sim.hpp"
#include "cfseq/train.hpp"
#include "json.hpp"

namespace cfseq {

using nlohmann::json;

inline void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw std::runtime_error("ensure_dir: " + path + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Config and scaler serialization

inline json model_config_to_json(const ModelConfig& c) {
  return json{{"d_x", c.d_x},
              {"d_a", c.d_a},
              {"d_y", c.d_y},
              {"d_v", c.d_v},
              {"t_len", c.t_len},
              {"n_blocks", c.n_blocks},
              {"d_h", c.d_h},
              {"n_h", c.n_h},
              {"d_r", c.d_r},
              {"n_fc", c.n_fc},
              {"dropout", c.dropout},
              {"l_max", c.l_max},
              {"pe_mode", static_cast<int>(c.pe_mode)},
              {"attn_dropout", c.attn_dropout},
              {"cross_attention",
               {c.cross_attention[0], c.cross_attention[1], c.cross_attention[2]}}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.d_x = j.at("d_x").get<long>();
  c.d_a = j.at("d_a").get<long>();
  c.d_y = j.at("d_y").get<long>();
  c.d_v = j.at("d_v").get<long>();
  c.t_len = j.at("t_len").get<long>();
  c.n_blocks = j.at("n_blocks").get<long>();
  c.d_h = j.at("d_h").get<long>();
  c.n_h = j.at("n_h").get<long>();
  c.d_r = j.at("d_r").get<long>();
  c.n_fc = j.at("n_fc").get<long>();
  c.dropout = j.at("dropout").get<double>();
  c.l_max = j.at("l_max").get<long>();
  int pe = j.at("pe_mode").get<int>();
  if (pe < 0 || pe > 2) throw std::runtime_error("model_config_from_json: bad pe_mode");
  c.pe_mode = static_cast<PeMode>(pe);
  c.attn_dropout = j.at("attn_dropout").get<bool>();
  const auto& ca = j.at("cross_attention");
  if (ca.size() != 3) throw std::runtime_error("model_config_from_json: bad cross_attention");
  for (int i = 0; i < 3; ++i) c.cross_attention[i] = ca.at(i).get<bool>();
  c.validate();
  return c;
}

inline json sim_config_to_json(const SimConfig& c) {
  return json{{"n_train", c.n_train}, {"n_val", c.n_val},     {"n_test", c.n_test},
              {"t_len", c.t_len},     {"gamma", c.gamma},     {"tau_max", c.tau_max},
              {"scheme", static_cast<int>(c.scheme)},         {"seed", c.seed}};
}

inline SimConfig sim_config_from_json(const json& j) {
  SimConfig c;
  c.n_train = j.at("n_train").get<long>();
  c.n_val = j.at("n_val").get<long>();
  c.n_test = j.at("n_test").get<long>();
  c.t_len = j.at("t_len").get<long>();
  c.gamma = j.at("gamma").get<double>();
  c.tau_max = j.at("tau_max").get<long>();
  int scheme = j.at("scheme").get<int>();
  if (scheme < 0 || scheme > 1) throw std::runtime_error("sim_config_from_json: bad scheme");
  c.scheme = static_cast<CfScheme>(scheme);
  c.seed = j.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

inline json train_config_to_json(const TrainConfig& c) {
  return json{{"balancing", static_cast<int>(c.balancing)},
              {"alpha", c.alpha},
              {"ema_beta", c.ema_beta},
              {"lr", c.lr},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"augment", c.augment},
              {"seed", c.seed},
              {"adam_b1", c.adam_b1},
              {"adam_b2", c.adam_b2},
              {"adam_eps", c.adam_eps}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  int bal = j.at("balancing").get<int>();
  if (bal < 0 || bal > 2) throw std::runtime_error("train_config_from_json: bad balancing");
  c.balancing = static_cast<Balancing>(bal);
  c.alpha = j.at("alpha").get<double>();
  c.ema_beta = j.at("ema_beta").get<double>();
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<long>();
  c.epochs = j.at("epochs").get<long>();
  c.augment = j.at("augment").get<bool>();
  c.seed = j.at("seed").get<uint64_t>();
  c.adam_b1 = j.at("adam_b1").get<double>();
  c.adam_b2 = j.at("adam_b2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  return c;
}

inline json msm_config_to_json(const MsmConfig& c) {
  return json{{"tau_max", c.tau_max},
              {"outcome_ridge", c.outcome_ridge},
              {"propensity_ridge", c.propensity_ridge},
              {"prob_floor", c.prob_floor},
              {"trunc_lo", c.trunc_lo},
              {"trunc_hi", c.trunc_hi}};
}

inline MsmConfig msm_config_from_json(const json& j) {
  MsmConfig c;
  c.tau_max = j.at("tau_max").get<long>();
  c.outcome_ridge = j.at("outcome_ridge").get<double>();
  c.propensity_ridge = j.at("propensity_ridge").get<double>();
  c.prob_floor = j.at("prob_floor").get<double>();
  c.trunc_lo = j.at("trunc_lo").get<double>();
  c.trunc_hi = j.at("trunc_hi").get<double>();
  c.validate();
  return c;
}

inline json scaler_to_json(const Scaler& s) {
  return json{{"x_mean", s.x_mean}, {"x_sd", s.x_sd}, {"y_mean", s.y_mean},
              {"y_sd", s.y_sd},     {"v_mean", s.v_mean}, {"v_sd", s.v_sd}};
}

inline Scaler scaler_from_json(const json& j) {
  Scaler s;
  s.x_mean = j.at("x_mean").get<std::vector<double>>();
  s.x_sd = j.at("x_sd").get<std::vector<double>>();
  s.y_mean = j.at("y_mean").get<std::vector<double>>();
  s.y_sd = j.at("y_sd").get<std::vector<double>>();
  s.v_mean = j.at("v_mean").get<std::vector<double>>();
  s.v_sd = j.at("v_sd").get<std::vector<double>>();
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline std::string hexfloat(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_double(const std::string& tok, const char* where) {
  const char* s = tok.c_str();
  char* end = nullptr;
  double v = std::strtod(s, &end);
  if (end == s || *end != '\0')
    throw std::runtime_error(std::string(where) + ": bad float token '" + tok + "'");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const ModelConfig& cfg, const Scaler& scaler,
                            const json& meta = json::object()) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << "cfseq-checkpoint 1\n";
  json header{{"config", model_config_to_json(cfg)},
              {"scaler", scaler_to_json(scaler)},
              {"meta", meta}};
  out << header.dump() << "\n";
  for (const auto& np : named_params(params)) {
    const auto& t = np.t;
    out << np.name << " " << t->rows() << " " << t->cols() << "\n";
    for (long r = 0; r < t->rows(); ++r) {
      for (long c = 0; c < t->cols(); ++c) {
        if (c) out << " ";
        out << detail::hexfloat(t->at(r, c));
      }
      out << "\n";
    }
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct Checkpoint {
  ModelConfig config;
  Scaler scaler;
  ModelParams params;
  json meta;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "cfseq-checkpoint 1")
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  if (!std::getline(in, line)) throw std::runtime_error("load_checkpoint: missing header");
  json header = json::parse(line);

  Checkpoint ck;
  ck.config = model_config_from_json(header.at("config"));
  ck.scaler = scaler_from_json(header.at("scaler"));
  ck.meta = header.value("meta", json::object());
  // Seed value is irrelevant: every tensor is overwritten below.
  ck.params = init_params(ck.config, 0);

  std::unordered_map<std::string, TensorPtr> by_name;
  for (const auto& np : named_params(ck.params)) by_name[np.name] = np.t;

  size_t filled = 0;
  std::string name;
  long rows = 0, cols = 0;
  while (in >> name >> rows >> cols) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("load_checkpoint: unknown parameter " + name);
    const auto& t = it->second;
    if (t->rows() != rows || t->cols() != cols)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    std::string tok;
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) {
        if (!(in >> tok))
          throw std::runtime_error("load_checkpoint: truncated values for " + name);
        t->at(r, c) = detail::parse_double(tok, "load_checkpoint");
      }
    ++filled;
  }
  if (filled != by_name.size())
    throw std::runtime_error("load_checkpoint: expected " + std::to_string(by_name.size()) +
                             " parameters, found " + std::to_string(filled));
  return ck;
}

// ---------------------------------------------------------------------------
// Metrics tables

inline const char* kMetricsHeader = "method\tgamma\ttau\tseed\tnrmse\twall_seconds";

namespace detail {

inline void write_metric_row(std::ostream& out, const MetricsRecord& r) {
  char num[64];
  out << r.method << "\t" << r.gamma << "\t" << r.tau << "\t" << r.seed << "\t";
  std::snprintf(num, sizeof num, "%.17g", r.nrmse);
  out << num << "\t";
  std::snprintf(num, sizeof num, "%.6g", r.wall_seconds);
  out << num << "\n";
}

}  // namespace detail

inline void write_metrics_tsv(const std::string& path, const std::vector<MetricsRecord>& recs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_metrics_tsv: cannot open " + path);
  out << kMetricsHeader << "\n";
  for (const auto& r : recs) detail::write_metric_row(out, r);
  if (!out) throw std::runtime_error("write_metrics_tsv: write failed for " + path);
}

inline void append_metrics_tsv(const std::string& path, const std::vector<MetricsRecord>& recs) {
  bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("append_metrics_tsv: cannot open " + path);
  if (fresh) out << kMetricsHeader << "\n";
  for (const auto& r : recs) detail::write_metric_row(out, r);
  if (!out) throw std::runtime_error("append_metrics_tsv: write failed for " + path);
}

inline std::vector<MetricsRecord> read_metrics_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_metrics_tsv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    throw std::runtime_error("read_metrics_tsv: bad header in " + path);
  std::vector<MetricsRecord> recs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    MetricsRecord r;
    std::string nrmse, wall;
    if (!(row >> r.method >> r.gamma >> r.tau >> r.seed >> nrmse >> wall))
      throw std::runtime_error("read_metrics_tsv: bad row '" + line + "'");
    r.nrmse = detail::parse_double(nrmse, "read_metrics_tsv");
    r.wall_seconds = detail::parse_double(wall, "read_metrics_tsv");
    recs.push_back(std::move(r));
  }
  return recs;
}

// ---------------------------------------------------------------------------
// JSON documents and JSONL logs

inline void write_json(const std::string& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_json: cannot open " + path);
  out << doc.dump(2) << "\n";
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_json: cannot open " + path);
  return json::parse(in);
}

// JSON has no NaN literal; absent losses become null.
inline json json_number_or_null(double v) {
  if (std::isnan(v) || std::isinf(v)) return nullptr;
  return v;
}

inline json epoch_to_json(const EpochRecord& e) {
  return json{{"epoch", e.epoch},
              {"l_gy", json_number_or_null(e.l_gy)},
              {"l_ga", json_number_or_null(e.l_ga)},
              {"l_conf", json_number_or_null(e.l_conf)},
              {"alpha_e", e.alpha_e},
              {"val_rmse", json_number_or_null(e.val_rmse)}};
}

inline void append_jsonl(const std::string& path, const json& doc) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("append_jsonl: cannot open " + path);
  out << doc.dump() << "\n";
}

// ---------------------------------------------------------------------------
// MSM summary (structured text, write-only)

inline void write_msm_summary(const std::string& path, const MsmModel& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_msm_summary: cannot open " + path);
  out << "msm-summary\n";
  out << "channels " << m.cfg.n_channels << " tau_max " << m.cfg.tau_max << "\n";
  auto coeffs = [&](const char* label, const std::vector<LogisticFit>& fits) {
    for (size_t ch = 0; ch < fits.size(); ++ch) {
      out << label << " channel " << ch << " separation " << (fits[ch].separation ? 1 : 0)
          << " iters " << fits[ch].iters << "\n ";
      for (double w : fits[ch].w) out << " " << w;
      out << "\n";
    }
  };
  coeffs("nominator", m.prop.nom);
  coeffs("denominator", m.prop.den);
  out << "floor_hit " << (m.floor_hit ? 1 : 0) << "\n";
  for (size_t t = 0; t < m.outcome.size(); ++t) {
    out << "outcome tau " << (t + 1) << " trunc_lo " << m.trunc_lo[t] << " trunc_hi "
        << m.trunc_hi[t] << " cond_proxy " << m.outcome[t].cond_proxy << "\n ";
    for (double w : m.outcome[t].w) out << " " << w;
    out << "\n";
  }
  if (!out) throw std::runtime_error("write_msm_summary: write failed for " + path);
}

}  // namespace cfseq
