#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "faceflow/model.hpp"

namespace faceflow {

// Flat key-value configuration with [section] headers; keys are stored as
// "section.key". Values are written and parsed locale-independently.
class ConfigMap {
 public:
  void set(const std::string& key, const std::string& value);
  void set_double(const std::string& key, double value);
  void set_int(const std::string& key, long long value);
  void set_bool(const std::string& key, bool value);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key,
                         const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Canonical text: sections and keys sorted, one "key = value" per line.
  std::string serialize() const;
  static ConfigMap parse(const std::string& text);
  static ConfigMap load(const std::string& path);
  void save(const std::string& path) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

std::string format_double(double v);
double parse_double(const std::string& s);

std::uint64_t fnv1a64(const std::string& bytes);

struct TrainConfig {
  double initial_lr = 1e-5;
  int warmup_steps = 500;
  int batch_size = 16;
  int sequence_length = 80;
  int epochs = 15;
  double negative_prob = 0.1;
  int steps_per_epoch = 0;  // 0: derived from the training-data volume
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

ModelConfig model_config_from(const ConfigMap& c);
void model_config_into(const ModelConfig& m, ConfigMap& c);
TrainConfig train_config_from(const ConfigMap& c);
void train_config_into(const TrainConfig& t, ConfigMap& c);

}  // namespace faceflow
