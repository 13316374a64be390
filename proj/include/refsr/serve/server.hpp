#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>
#include <torch/torch.h>

#include "refsr/core/control.hpp"
#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/io/checkpoint.hpp"
#include "refsr/io/png.hpp"
#include "refsr/pipeline.hpp"

namespace refsr::serve {

using nlohmann::json;

struct ServeConfig {
  std::string model_path;
  std::string host = "0.0.0.0";
  int port = 8080;
  int64_t max_image_px = 4 * 1024 * 1024;
  int max_concurrency = 1;

  static ServeConfig from_env() {
    ServeConfig c;
    auto get = [](const char* k) -> std::optional<std::string> {
      const char* v = std::getenv(k);
      if (!v || !*v) return std::nullopt;
      return std::string(v);
    };
    auto integer = [](const std::string& k, const std::string& v) {
      try {
        size_t n = 0;
        const long long x = std::stoll(v, &n);
        if (n != v.size() || x <= 0) throw std::invalid_argument(k);
        return x;
      } catch (const std::logic_error&) {
        throw ConfigError(k + " must be a positive integer, got '" + v + "'");
      }
    };
    if (auto v = get("MODEL_PATH")) c.model_path = *v;
    if (auto v = get("PORT")) c.port = static_cast<int>(integer("PORT", *v));
    if (auto v = get("MAX_IMAGE_PX")) c.max_image_px = integer("MAX_IMAGE_PX", *v);
    if (auto v = get("MAX_CONCURRENCY")) c.max_concurrency = static_cast<int>(integer("MAX_CONCURRENCY", *v));
    return c;
  }
};

struct HttpError {
  int status;
  std::string code;
  std::string message;
};

/// Reads width and height from a PNG IHDR without decoding pixels.
inline std::optional<std::pair<int64_t, int64_t>> png_dimensions(const std::string& b) {
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (b.size() < 24 || std::memcmp(b.data(), sig, 8) != 0 || b.compare(12, 4, "IHDR") != 0) return std::nullopt;
  auto be32 = [&](size_t at) {
    int64_t v = 0;
    for (size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(b[at + i]);
    return v;
  };
  return std::make_pair(be32(16), be32(20));
}

class Service {
 public:
  explicit Service(ServeConfig cfg) : cfg_(std::move(cfg)), started_(std::chrono::steady_clock::now()) {}

  ~Service() {
    if (loader_.joinable()) loader_.join();
  }

  const ServeConfig& config() const { return cfg_; }
  bool ready() const { return ready_.load(); }

  void load() {
    try {
      auto lm = std::make_shared<io::LoadedModel>(io::load_checkpoint(cfg_.model_path));
      std::lock_guard lock(mu_);
      model_ = std::move(lm);
      ready_ = true;
    } catch (const std::exception& e) {
      std::lock_guard lock(mu_);
      load_error_ = e.what();
    }
  }

  void load_async() {
    loader_ = std::thread([this] { load(); });
  }

  /// Uses an already loaded model, for embedding and tests.
  void set_model(io::LoadedModel lm) {
    std::lock_guard lock(mu_);
    model_ = std::make_shared<io::LoadedModel>(std::move(lm));
    ready_ = true;
  }

  void install(httplib::Server& srv) {
    srv.set_payload_max_length(static_cast<size_t>(cfg_.max_image_px) * 4 * 3 + (1 << 20));
    srv.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) { health(res); });
    srv.Get("/v1/model", [this](const httplib::Request&, httplib::Response& res) { model_info(res); });
    srv.Post("/v1/superresolve", [this](const httplib::Request& req, httplib::Response& res) { superresolve(req, res); });
  }

  /// Blocks until the server stops.
  void run() {
    httplib::Server srv;
    install(srv);
    if (!srv.listen(cfg_.host, cfg_.port)) throw IoError("cannot listen on " + cfg_.host + ":" + std::to_string(cfg_.port));
  }

 private:
  static void send_error(httplib::Response& res, const HttpError& e) {
    res.status = e.status;
    res.set_content(json{{"code", e.code}, {"message", e.message}}.dump(), "application/json");
  }

  std::shared_ptr<io::LoadedModel> current() {
    std::lock_guard lock(mu_);
    return model_;
  }

  HttpError not_ready() {
    std::lock_guard lock(mu_);
    if (!load_error_.empty()) return {503, "model_load_failed", load_error_};
    return {503, "model_loading", "model is not loaded yet"};
  }

  void health(httplib::Response& res) {
    auto m = current();
    if (!m) return send_error(res, not_ready());
    const double up = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    res.set_content(json{{"status", "ok"}, {"model_digest", m->info.digest}, {"uptime_s", up}}.dump(),
                    "application/json");
  }

  void model_info(httplib::Response& res) {
    auto m = current();
    if (!m) return send_error(res, not_ready());
    const auto& c = m->info.config;
    json j{{"model_digest", m->info.digest},
           {"config_digest", m->info.config_digest},
           {"scale", c.scale},
           {"hr_size", c.hr_size},
           {"lr_size", c.lr_size()},
           {"levels", c.levels()},
           {"K", c.levels()},
           {"N", c.num_queries},
           {"encoder_tokens", c.encoder_tokens()},
           {"T", c.T},
           {"t_prime", c.t_prime},
           {"default_steps", c.steps},
           {"max_image_px", cfg_.max_image_px},
           {"config", c},
           {"meta", m->info.meta}};
    res.set_content(j.dump(), "application/json");
  }

  struct Slot {
    std::atomic<int>& n;
    ~Slot() { --n; }
  };

  torch::Tensor decode(const httplib::Request& req, const std::string& name, bool required_rgb) {
    const auto& content = req.get_file_value(name).content;
    auto dims = png_dimensions(content);
    if (!dims) throw HttpError{400, "bad_image", name + " is not a PNG image"};
    if (dims->first * dims->second > cfg_.max_image_px)
      throw HttpError{413, "image_too_large",
                      name + " has " + std::to_string(dims->first * dims->second) + " pixels, limit " +
                          std::to_string(cfg_.max_image_px)};
    torch::Tensor t;
    try {
      t = io::from_raster(io::decode_png(content));
    } catch (const IoError& e) {
      throw HttpError{400, "bad_image", name + ": " + e.what()};
    }
    if (required_rgb && t.size(0) == 1) t = t.expand({3, -1, -1}).contiguous();
    return t;
  }

  template <class T>
  static T field(const httplib::Request& req, const std::string& name, T fallback) {
    if (!req.has_file(name)) return fallback;
    const auto v = req.get_file_value(name).content;
    try {
      size_t n = 0;
      T out{};
      if constexpr (std::is_same_v<T, bool>) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::invalid_argument(name);
      } else if constexpr (std::is_floating_point_v<T>) {
        out = static_cast<T>(std::stod(v, &n));
      } else {
        out = static_cast<T>(std::stoull(v, &n));
      }
      if (n != v.size()) throw std::invalid_argument(name);
      return out;
    } catch (const std::logic_error&) {
      throw HttpError{400, "bad_field", "field '" + name + "' has unparseable value '" + v + "'"};
    }
  }

  void superresolve(const httplib::Request& req, httplib::Response& res) {
    auto m = current();
    if (!m) return send_error(res, not_ready());
    if (++active_ > cfg_.max_concurrency) {
      --active_;
      return send_error(res, {429, "busy", "concurrency limit of " + std::to_string(cfg_.max_concurrency) + " reached"});
    }
    Slot slot{active_};
    try {
      if (!req.is_multipart_form_data()) throw HttpError{400, "malformed", "expected multipart/form-data"};
      for (const char* part : {"lr", "ref"})
        if (!req.has_file(part)) throw HttpError{400, "malformed", std::string("missing part '") + part + "'"};
      RunRequest rr;
      rr.lr = ImageTensor::unit(decode(req, "lr", true).unsqueeze(0));
      rr.ref = ImageTensor::unit(decode(req, "ref", true).unsqueeze(0));
      rr.control.s = field<double>(req, "s", 1.0);
      if (req.has_file("mask")) {
        auto mk = decode(req, "mask", false);
        rr.control.mask = mk[0];
      }
      rr.options.steps = field<int64_t>(req, "steps", m->info.config.steps);
      rr.options.seed = field<std::uint64_t>(req, "seed", 0);
      rr.options.better_start = field<bool>(req, "better_start", true);
      rr.diagnostics = field<bool>(req, "return_diagnostics", false);

      RunResponse out;
      try {
        out = run_superresolve(m->model, m->info.digest, rr);
      } catch (const ShapeError& e) {
        throw HttpError{422, "shape", e.what()};
      } catch (const ParameterError& e) {
        throw HttpError{422, "parameter", e.what()};
      }
      auto meta = out.metadata;
      if (rr.diagnostics) meta["diagnostics"] = diagnostics_json(out.maps);

      const std::string boundary = "refsr-" + out.metadata["model_digest"].get<std::string>().substr(0, 16);
      std::string body;
      auto part = [&](const std::string& name, const std::string& type, const std::string& data) {
        body += "--" + boundary + "\r\nContent-Disposition: form-data; name=\"" + name + "\"\r\nContent-Type: " + type +
                "\r\n\r\n" + data + "\r\n";
      };
      part("sr", "image/png", io::png_bytes(out.sr.data[0]));
      part("metadata", "application/json", meta.dump());
      if (rr.diagnostics)
        for (size_t k = 0; k < out.maps.size(); ++k) {
          part("m_ma_" + std::to_string(k), "image/png", io::png_bytes(map_image(out.maps[k].effective_ma()[0], false)));
          part("m_lca_" + std::to_string(k), "image/png", io::png_bytes(map_image(out.maps[k].effective_lca()[0], true)));
        }
      body += "--" + boundary + "--\r\n";
      res.set_content(body, "multipart/mixed; boundary=" + boundary);
    } catch (const HttpError& e) {
      send_error(res, e);
    } catch (const std::exception& e) {
      send_error(res, {500, "internal", e.what()});
    }
  }

  ServeConfig cfg_;
  std::chrono::steady_clock::time_point started_;
  std::mutex mu_;
  std::shared_ptr<io::LoadedModel> model_;
  std::string load_error_;
  std::atomic<bool> ready_{false};
  std::atomic<int> active_{0};
  std::thread loader_;
};

/// Splits a multipart/mixed body into (name, content) parts.
inline std::vector<std::pair<std::string, std::string>> split_multipart(const std::string& body,
                                                                        const std::string& content_type) {
  std::vector<std::pair<std::string, std::string>> out;
  const auto bpos = content_type.find("boundary=");
  if (bpos == std::string::npos) throw IoError("multipart response without boundary");
  const std::string delim = "--" + content_type.substr(bpos + 9);
  size_t at = body.find(delim);
  while (at != std::string::npos) {
    at += delim.size();
    if (body.compare(at, 2, "--") == 0) break;
    at += 2;
    const auto hend = body.find("\r\n\r\n", at);
    const auto next = body.find("\r\n" + delim, hend);
    if (hend == std::string::npos || next == std::string::npos) throw IoError("truncated multipart body");
    const auto headers = body.substr(at, hend - at);
    std::string name;
    if (auto n = headers.find("name=\""); n != std::string::npos)
      name = headers.substr(n + 6, headers.find('"', n + 6) - n - 6);
    out.emplace_back(name, body.substr(hend + 4, next - hend - 4));
    at = next + 2;
    at = body.find(delim, at);
  }
  return out;
}

}  // namespace refsr::serve
