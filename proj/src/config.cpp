#include "faceflow/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace faceflow {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  double v = 0;
  const char* begin = s.data();
  const char* end = begin + s.size();
  auto r = std::from_chars(begin, end, v);
  if (r.ec != std::errc{} )
    throw std::invalid_argument("bad numeric value: '" + s + "'");
  return v;
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

static std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

void ConfigMap::set(const std::string& key, const std::string& value) {
  kv_[key] = value;
}
void ConfigMap::set_double(const std::string& key, double value) {
  kv_[key] = format_double(value);
}
void ConfigMap::set_int(const std::string& key, long long value) {
  kv_[key] = std::to_string(value);
}
void ConfigMap::set_bool(const std::string& key, bool value) {
  kv_[key] = value ? "true" : "false";
}

bool ConfigMap::has(const std::string& key) const { return kv_.count(key) > 0; }

std::string ConfigMap::get_string(const std::string& key,
                                  const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : parse_double(it->second);
}

long long ConfigMap::get_int(const std::string& key, long long fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  return static_cast<long long>(parse_double(it->second));
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("bad boolean for " + key + ": '" + v + "'");
}

std::string ConfigMap::serialize() const {
  std::ostringstream os;
  std::string section;
  for (const auto& [key, value] : kv_) {  // std::map keeps keys sorted
    size_t dot = key.find('.');
    std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (sec != section) {
      os << "[" << sec << "]\n";
      section = sec;
    }
    os << name << " = " << value << "\n";
  }
  return os.str();
}

ConfigMap ConfigMap::parse(const std::string& text) {
  ConfigMap c;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    c.set(section.empty() ? key : section + "." + key, value);
  }
  return c;
}

ConfigMap ConfigMap::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse(os.str());
}

void ConfigMap::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config file: " + path);
  f << serialize();
}

void TrainConfig::validate() const {
  if (negative_prob < 0 || negative_prob > 1)
    throw std::invalid_argument("train config: negative_prob must be in [0,1]");
  if (batch_size < 1 || sequence_length < 1 || epochs < 0)
    throw std::invalid_argument("train config: bad sizes");
  if (initial_lr < 0 || warmup_steps < 0)
    throw std::invalid_argument("train config: bad learning-rate settings");
}

ModelConfig model_config_from(const ConfigMap& c) {
  ModelConfig m;
  m.facial_dim = static_cast<int>(c.get_int("model.facial_dim", m.facial_dim));
  m.acoustic_dim =
      static_cast<int>(c.get_int("model.acoustic_dim", m.acoustic_dim));
  m.flow_steps = static_cast<int>(c.get_int("model.flow_steps", m.flow_steps));
  m.cond_dim = static_cast<int>(c.get_int("model.cond_dim", m.cond_dim));
  m.coupling_hidden =
      static_cast<int>(c.get_int("model.coupling_hidden", m.coupling_hidden));
  m.coupling_log_scale_bound = c.get_double("model.coupling_log_scale_bound",
                                            m.coupling_log_scale_bound);
  m.t_avatar_speech =
      static_cast<int>(c.get_int("model.t_avatar_speech", m.t_avatar_speech));
  m.t_inter_speech =
      static_cast<int>(c.get_int("model.t_inter_speech", m.t_inter_speech));
  m.t_inter_face =
      static_cast<int>(c.get_int("model.t_inter_face", m.t_inter_face));
  m.t_history = static_cast<int>(c.get_int("model.t_history", m.t_history));
  m.gru_hidden = static_cast<int>(c.get_int("model.gru_hidden", m.gru_hidden));
  m.gru_layers = static_cast<int>(c.get_int("model.gru_layers", m.gru_layers));
  m.ablation.no_face = c.get_bool("model.no_face", m.ablation.no_face);
  m.ablation.no_speech = c.get_bool("model.no_speech", m.ablation.no_speech);
  m.fps = c.get_double("model.fps", m.fps);
  m.validate();
  return m;
}

void model_config_into(const ModelConfig& m, ConfigMap& c) {
  c.set_int("model.facial_dim", m.facial_dim);
  c.set_int("model.acoustic_dim", m.acoustic_dim);
  c.set_int("model.flow_steps", m.flow_steps);
  c.set_int("model.cond_dim", m.cond_dim);
  c.set_int("model.coupling_hidden", m.coupling_hidden);
  c.set_double("model.coupling_log_scale_bound", m.coupling_log_scale_bound);
  c.set_int("model.t_avatar_speech", m.t_avatar_speech);
  c.set_int("model.t_inter_speech", m.t_inter_speech);
  c.set_int("model.t_inter_face", m.t_inter_face);
  c.set_int("model.t_history", m.t_history);
  c.set_int("model.gru_hidden", m.gru_hidden);
  c.set_int("model.gru_layers", m.gru_layers);
  c.set_bool("model.no_face", m.ablation.no_face);
  c.set_bool("model.no_speech", m.ablation.no_speech);
  c.set_double("model.fps", m.fps);
}

TrainConfig train_config_from(const ConfigMap& c) {
  TrainConfig t;
  t.initial_lr = c.get_double("train.initial_lr", t.initial_lr);
  t.warmup_steps =
      static_cast<int>(c.get_int("train.warmup_steps", t.warmup_steps));
  t.batch_size = static_cast<int>(c.get_int("train.batch_size", t.batch_size));
  t.sequence_length =
      static_cast<int>(c.get_int("train.sequence_length", t.sequence_length));
  t.epochs = static_cast<int>(c.get_int("train.epochs", t.epochs));
  t.negative_prob = c.get_double("train.negative_prob", t.negative_prob);
  t.steps_per_epoch =
      static_cast<int>(c.get_int("train.steps_per_epoch", t.steps_per_epoch));
  t.seed = static_cast<std::uint64_t>(c.get_int("train.seed", 0));
  t.beta1 = c.get_double("train.beta1", t.beta1);
  t.beta2 = c.get_double("train.beta2", t.beta2);
  t.epsilon = c.get_double("train.epsilon", t.epsilon);
  t.validate();
  return t;
}

void train_config_into(const TrainConfig& t, ConfigMap& c) {
  c.set_double("train.initial_lr", t.initial_lr);
  c.set_int("train.warmup_steps", t.warmup_steps);
  c.set_int("train.batch_size", t.batch_size);
  c.set_int("train.sequence_length", t.sequence_length);
  c.set_int("train.epochs", t.epochs);
  c.set_double("train.negative_prob", t.negative_prob);
  c.set_int("train.steps_per_epoch", t.steps_per_epoch);
  c.set_int("train.seed", static_cast<long long>(t.seed));
  c.set_double("train.beta1", t.beta1);
  c.set_double("train.beta2", t.beta2);
  c.set_double("train.epsilon", t.epsilon);
}

}  // namespace faceflow
