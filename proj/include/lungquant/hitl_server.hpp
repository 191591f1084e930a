#pragma once

// HTTP front end for a HITL session.
//
//   GET  /sessions/:id                                        status and iteration records
//   GET  /sessions/:id/volumes/:vid                           geometry and annotation state
//   GET  /sessions/:id/volumes/:vid/slices/:axis/:index       windowed PNG (?level=&width=)
//   GET  /sessions/:id/volumes/:vid/proposal                  whole proposal as per-slice RLE
//   GET  /sessions/:id/volumes/:vid/proposal/:axis/:index     one proposal slice as RLE
//   POST /sessions/:id/volumes/:vid/corrections               {mask_rle, seconds}: annotation or correction
//   POST /sessions/:id/iterate                                start training (202 / 409)
//   GET  /sessions/:id/report                                 labeling-time report

#include <csetjmp>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lungquant/hitl.hpp"
#include "lungquant/rle.hpp"
#include "lungquant/volume_io.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro.
#include <httplib.h>
#include <png.h>

namespace lungquant::hitl {

/// 8-bit grayscale PNG of row-major `pixels`.
inline std::string encode_png(const std::vector<std::uint8_t>& pixels, int width, int height) {
  if (width <= 0 || height <= 0 || pixels.size() != static_cast<std::size_t>(width) * height)
    throw std::invalid_argument("encode_png: bad image size");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png: cannot create writer");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png: cannot create info");
  }
  std::string out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png: encoding failed");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), n);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(r) * width));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

/// Windowed slice rendered to bytes, 0 at the bottom of the window and 255 at the top.
inline std::vector<std::uint8_t> render_slice(const Volume& v, rle::Axis axis, int index, double level, double width) {
  const auto w = apply_window(v, level, width);
  const auto px = rle::extract_slice(w, axis, index);
  std::vector<std::uint8_t> out(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) out[i] = static_cast<std::uint8_t>(std::lround(px[i] * 255.0f));
  return out;
}

class Server {
 public:
  explicit Server(Service& service) : service_(service) { routes(); }

  /// Binds and serves until stop(); returns false if the port could not be bound.
  bool listen(const std::string& host, int port) { return http_.listen(host, port); }
  int bind_any_port(const std::string& host) { return http_.bind_to_any_port(host); }
  bool bind_port(const std::string& host, int port) { return http_.bind_to_port(host, port); }
  bool listen_after_bind() { return http_.listen_after_bind(); }
  void stop() { http_.stop(); }
  bool running() const { return http_.is_running(); }
  void wait_until_ready() const { http_.wait_until_ready(); }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }
  static void send_error(httplib::Response& res, int status, const std::string& msg) {
    send_json(res, status, {{"error", msg}});
  }

  bool check_session(const httplib::Request& req, httplib::Response& res) const {
    const auto& id = req.path_params.at("id");
    const bool ok = service_.with_session([&](const Session& s) { return s.config().session_id == id; });
    if (!ok) send_error(res, 404, "unknown session " + id);
    return ok;
  }

  /// Runs `f`, translating engine exceptions into HTTP statuses.
  template <typename F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const UnknownVolume& e) {
      send_error(res, 404, e.what());
    } catch (const StaleProposal& e) {
      send_error(res, 409, e.what());
    } catch (const StateError& e) {
      send_error(res, 409, e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, std::string("malformed request body: ") + e.what());
    } catch (const std::invalid_argument& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  }

  void routes() {
    http_.Get("/sessions/:id", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_session(req, res)) return;
      send_json(res, 200, service_.status());
    });

    http_.Get("/sessions/:id/report", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_session(req, res)) return;
      const auto body = service_.with_session([](const Session& s) {
        auto j = to_json(s.time_report());
        j["iterations"] = s.records_json();
        j["state"] = to_string(s.state());
        return j;
      });
      send_json(res, 200, body);
    });

    http_.Get("/sessions/:id/volumes/:vid", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_session(req, res)) return;
      guarded(res, [&] {
        const auto& vid = req.path_params.at("vid");
        const auto body = service_.with_session([&](const Session& s) {
          const auto& g = s.volume(vid).geometry();
          nlohmann::json j{{"id", vid},
                           {"dims", g.dims},
                           {"spacing", g.spacing},
                           {"origin", g.origin},
                           {"batch", s.config().batch_of(vid)},
                           {"annotated", s.annotations().contains(vid)},
                           {"has_proposal", s.proposal(vid) != nullptr}};
          if (s.proposal(vid)) j["proposal_iteration"] = s.proposal_iteration(vid);
          return j;
        });
        send_json(res, 200, body);
      });
    });

    http_.Get("/sessions/:id/volumes/:vid/slices/:axis/:index", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_session(req, res)) return;
      guarded(res, [&] {
        const auto axis = rle::parse_axis(req.path_params.at("axis"));
        const int index = parse_int(req.path_params.at("index"));
        const double level = req.has_param("level") ? parse_double(req.get_param_value("level")) : kLungWindowLevel;
        const double width = req.has_param("width") ? parse_double(req.get_param_value("width")) : kLungWindowWidth;
        const auto& vid = req.path_params.at("vid");
        const auto png = service_.with_session([&](const Session& s) {
          const auto& v = s.volume(vid);
          const auto shape = rle::slice_shape(v.geometry(), axis);
          return encode_png(render_slice(v, axis, index, level, width), shape.width, shape.height);
        });
        res.status = 200;
        res.set_content(png, "image/png");
      });
    });

    http_.Get("/sessions/:id/volumes/:vid/proposal", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_session(req, res)) return;
      guarded(res, [&] {
        const auto& vid = req.path_params.at("vid");
        const auto body = service_.with_session([&](const Session& s) -> std::optional<nlohmann::json> {
          s.volume(vid);
          const auto* p = s.proposal(vid);
          if (!p) return std::nullopt;
          auto j = rle::mask_json(*p);
          j["proposal_iteration"] = s.proposal_iteration(vid);
          return j;
        });
        if (!body) return send_error(res, 404, "no proposal for " + vid);
        send_json(res, 200, *body);
      });
    });

    http_.Get("/sessions/:id/volumes/:vid/proposal/:axis/:index", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_session(req, res)) return;
      guarded(res, [&] {
        const auto& vid = req.path_params.at("vid");
        const auto axis = rle::parse_axis(req.path_params.at("axis"));
        const int index = parse_int(req.path_params.at("index"));
        const auto body = service_.with_session([&](const Session& s) -> std::optional<nlohmann::json> {
          s.volume(vid);
          const auto* p = s.proposal(vid);
          if (!p) return std::nullopt;
          auto j = rle::slice_json(*p, axis, index);
          j["proposal_iteration"] = s.proposal_iteration(vid);
          return j;
        });
        if (!body) return send_error(res, 404, "no proposal for " + vid);
        send_json(res, 200, *body);
      });
    });

    http_.Post("/sessions/:id/volumes/:vid/corrections", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_session(req, res)) return;
      guarded(res, [&] {
        const auto& vid = req.path_params.at("vid");
        const auto body = nlohmann::json::parse(req.body);
        const auto geometry = service_.with_session([&](const Session& s) { return s.volume(vid).geometry(); });
        const auto mask = rle::mask_from_json(body.contains("mask_rle") ? body.at("mask_rle") : body.at("mask"), geometry);
        const double seconds = body.value("seconds", 0.0);
        const std::string editor = body.value("editor", "");
        std::optional<int> from;
        if (body.contains("proposal_iteration") && !body["proposal_iteration"].is_null())
          from = body["proposal_iteration"].get<int>();
        const auto kind = service_.submit(vid, mask, seconds, editor, from);
        const char* names[] = {"annotation", "correction", "queued"};
        send_json(res, kind == Service::Submitted::queued ? 202 : 200,
                  {{"accepted", names[static_cast<int>(kind)]}, {"status", service_.status()}});
      });
    });

    http_.Post("/sessions/:id/iterate", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_session(req, res)) return;
      guarded(res, [&] {
        switch (service_.start_iteration()) {
          case Service::Start::accepted: return send_json(res, 202, {{"accepted", true}});
          case Service::Start::busy: return send_error(res, 409, "training already in progress");
          case Service::Start::not_ready:
            return send_error(res, 409, "session is not ready to train (state " +
                                            service_.with_session([](const Session& s) { return to_string(s.state()); }) + ")");
        }
      });
    });
  }

  static int parse_int(const std::string& s) {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("not an integer: " + s);
    return v;
  }
  static double parse_double(const std::string& s) {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("not a number: " + s);
    return v;
  }

  Service& service_;
  httplib::Server http_;
};

}  // namespace lungquant::hitl
