#include "lafa/kernels.hpp"

#include <algorithm>
#include <cctype>

#include <json.hpp>

namespace lafa {

std::string to_string(KernelFamily family) {
  switch (family) {
    case KernelFamily::RBF: return "rbf";
    case KernelFamily::Cubic: return "cubic";
    case KernelFamily::Cosine: return "cosine";
    case KernelFamily::Laplacian: return "laplacian";
    case KernelFamily::L2Clip: return "l2clip";
    case KernelFamily::Indicator: return "indicator";
  }
  return "indicator";
}

KernelFamily kernel_family_from_string(const std::string& name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "rbf") return KernelFamily::RBF;
  if (lower == "cubic" || lower == "polynomial") return KernelFamily::Cubic;
  if (lower == "cosine" || lower == "cos") return KernelFamily::Cosine;
  if (lower == "laplacian") return KernelFamily::Laplacian;
  if (lower == "l2clip" || lower == "l2") return KernelFamily::L2Clip;
  if (lower == "indicator") return KernelFamily::Indicator;
  throw ConfigError("unknown kernel family '" + name + "'");
}

void validate(const KernelSpec& s) {
  if (!(s.l > 0.0)) throw ConfigError("kernel bandwidth l must be positive");
  if (!(s.gamma > 0.0)) throw ConfigError("kernel gamma must be positive");
  if (s.degree < 1) throw ConfigError("kernel degree must be at least 1");
  if (!(s.clip_left > 0.0) || !(s.clip_left <= s.clip_right)) {
    throw ConfigError("kernel clip bounds must satisfy 0 < clip_left <= clip_right");
  }
}

std::string kernel_to_json(const KernelSpec& s) {
  nlohmann::json j;
  j["family"] = to_string(s.family);
  switch (s.family) {
    case KernelFamily::RBF:
    case KernelFamily::Laplacian: j["l"] = s.l; break;
    case KernelFamily::Cubic:
      j["gamma"] = s.gamma;
      j["c0"] = s.c0;
      j["degree"] = s.degree;
      break;
    case KernelFamily::L2Clip:
      j["clip_left"] = s.clip_left;
      j["clip_right"] = s.clip_right;
      break;
    case KernelFamily::Cosine:
    case KernelFamily::Indicator: break;
  }
  return j.dump();
}

KernelSpec kernel_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("kernel spec: ") + e.what());
  }
  if (!j.is_object() || !j.contains("family")) throw ConfigError("kernel spec needs a \"family\" key");
  KernelSpec s;
  try {
    s.family = kernel_family_from_string(j["family"].get<std::string>());
    s.l = j.value("l", s.l);
    s.gamma = j.value("gamma", s.gamma);
    s.c0 = j.value("c0", s.c0);
    s.degree = j.value("degree", s.degree);
    s.clip_left = j.value("clip_left", s.clip_left);
    s.clip_right = j.value("clip_right", s.clip_right);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("kernel spec: ") + e.what());
  }
  validate(s);
  return s;
}

}  // namespace lafa
