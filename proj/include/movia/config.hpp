#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "movia/common.hpp"

namespace movia {

// Flat `key = value` configuration with a fixed schema. Unknown keys are
// validation failures so typos surface immediately.
class RunConfig {
 public:
  RunConfig() {
    set_defaults();
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    RunConfig cfg;
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = strip(line);
      if (s.empty() || s[0] == '#') continue;
      size_t eq = s.find('=');
      check_valid(eq != std::string::npos,
                  "config: line " + std::to_string(lineno) + " is not 'key = value'");
      std::string key = strip(s.substr(0, eq));
      std::string val = strip(s.substr(eq + 1));
      check_valid(cfg.values_.count(key) > 0, "config: unknown key '" + key + "'");
      cfg.values_[key] = val;
    }
    return cfg;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("config: cannot write " + path.string());
    out << "# movia run configuration\n"
        << "# paths\n";
    for (const char* k : {"data_dir", "out_dir", "motion_ckpt", "video_ckpt", "codec_ckpt"})
      out << k << " = " << values_.at(k) << "\n";
    out << "\n# sampling\n";
    for (const char* k : {"seed", "sample_steps", "fps", "frames", "size"})
      out << k << " = " << values_.at(k) << "\n";
    out << "\n# dataset\n";
    for (const char* k : {"clips", "fps_min", "fps_max"}) out << k << " = " << values_.at(k) << "\n";
    out << "\n# training\n";
    for (const char* k : {"batch", "motion_steps", "motion_lr", "video_steps", "video_lr",
                          "video_spatial_lr_mult", "drop_prob", "codec_steps_2d", "codec_steps_arm",
                          "codec_lr", "lambda1", "lambda2", "lambda3", "lambda4",
                          "gan_warmup_steps"})
      out << k << " = " << values_.at(k) << "\n";
  }

  std::string str(const std::string& key) const { return at(key); }

  int64_t integer(const std::string& key) const {
    try {
      return std::stoll(at(key));
    } catch (const std::exception&) {
      throw ValidationError("config: key '" + key + "' is not an integer");
    }
  }

  double real(const std::string& key) const {
    try {
      return std::stod(at(key));
    } catch (const std::exception&) {
      throw ValidationError("config: key '" + key + "' is not a number");
    }
  }

  void set(const std::string& key, const std::string& value) {
    check_valid(values_.count(key) > 0, "config: unknown key '" + key + "'");
    values_[key] = value;
  }

  // MOVIA_SEED takes precedence over the configured seed.
  uint64_t effective_seed() const {
    if (const char* env = std::getenv("MOVIA_SEED")) {
      try {
        return std::stoull(env);
      } catch (const std::exception&) {
        throw ValidationError("MOVIA_SEED is not an unsigned integer");
      }
    }
    return static_cast<uint64_t>(integer("seed"));
  }

 private:
  static std::string strip(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  const std::string& at(const std::string& key) const {
    auto it = values_.find(key);
    check_valid(it != values_.end(), "config: unknown key '" + key + "'");
    return it->second;
  }

  void set_defaults() {
    values_ = {
        {"data_dir", "data"},
        {"out_dir", "out"},
        {"motion_ckpt", "out/motion.ckpt"},
        {"video_ckpt", "out/video.ckpt"},
        {"codec_ckpt", "out/codec_flow.ckpt"},
        {"seed", "0"},
        {"sample_steps", "50"},
        {"fps", "3"},
        {"frames", "9"},
        {"size", "32"},
        {"clips", "8"},
        {"fps_min", "3"},
        {"fps_max", "30"},
        {"batch", "4"},
        {"motion_steps", "3000"},
        {"motion_lr", "2e-3"},
        {"video_steps", "1500"},
        {"video_lr", "2e-3"},
        {"video_spatial_lr_mult", "0.1"},
        {"drop_prob", "0.5"},
        {"codec_steps_2d", "1600"},
        {"codec_steps_arm", "700"},
        {"codec_lr", "2e-3"},
        {"lambda1", "1.0"},
        {"lambda2", "1.0"},
        {"lambda3", "0.1"},
        {"lambda4", "0.1"},
        {"gan_warmup_steps", "2000"},
    };
  }

  std::map<std::string, std::string> values_;
};

}  // namespace movia
