#include <doctest.h>
#include <httplib.h>

#include <atomic>
#include <fstream>
#include <sstream>
#include <thread>

#include "clickseg/error.hpp"
#include "clickseg/experiment.hpp"
#include "clickseg/service.hpp"
#include "support.hpp"

using namespace clickseg;
using nlohmann::json;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Env {
  std::filesystem::path dir;
  std::string checkpoint_bytes;
  std::string image_bytes;
  LabelMask labels;
};

Env make_env(const std::string& name, int size = 40) {
  Env e;
  e.dir = testsupport::scratch_dir(name);
  ModelConfig cfg;
  cfg.widths = {4, 6, 8};
  SegmentationModel(cfg, 11).save(e.dir / "m.ckpt");
  e.checkpoint_bytes = slurp(e.dir / "m.ckpt");
  ToyConfig toy;
  toy.height = toy.width = size;
  auto [img, lab] = generate_toy(12, toy).front();
  save_raster(e.dir / "img.png", img);
  e.image_bytes = slurp(e.dir / "img.png");
  e.labels = lab;
  return e;
}

SessionOptions options_for(SessionManager& m, const Env& e) {
  SessionOptions o;
  o.checkpoint_id = m.store().put_checkpoint(e.checkpoint_bytes);
  o.image_id = m.store().put_image(e.image_bytes);
  o.tile_size = 24;
  o.overlap = 8;
  return o;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::io;
}

}  // namespace

TEST_CASE("blob store is content addressed and validates input") {
  const Env e = make_env("blobstore");
  BlobStore store(e.dir / "store");
  const std::string id = store.put_image(e.image_bytes);
  CHECK(id.size() == 64);
  CHECK(store.put_image(e.image_bytes) == id);
  CHECK(store.has_image(id));
  CHECK(store.image(id).pixels == load_raster(e.dir / "img.png").image.pixels);
  const std::string ck = store.put_checkpoint(e.checkpoint_bytes);
  CHECK(store.checkpoint(ck).parameters() == SegmentationModel::load(e.dir / "m.ckpt").parameters());
  CHECK(code_of([&] { store.put_image("not an image"); }) == ErrorCode::validation);
  CHECK(code_of([&] { store.put_checkpoint("garbage"); }) == ErrorCode::validation);
  CHECK(code_of([&] { store.image(std::string(64, 'a')); }) == ErrorCode::not_found);
  CHECK(code_of([&] { store.image("../../etc/passwd"); }) == ErrorCode::not_found);
  CHECK_FALSE(store.confidnet(ck));
  std::filesystem::remove_all(e.dir / "store" / "tmp");
  CHECK(base64_decode(base64_encode("any\0bytes\xff")) == std::string("any\0bytes\xff"));
  CHECK(base64_encode("ab") == "YWI=");
}

TEST_CASE("session lifecycle") {
  const Env e = make_env("session");
  SessionManager mgr(e.dir / "store");
  SessionOptions o = options_for(mgr, e);

  SUBCASE("unknown ids") {
    SessionOptions bad = o;
    bad.checkpoint_id = std::string(64, '0');
    CHECK(code_of([&] { mgr.create(bad); }) == ErrorCode::not_found);
    CHECK(code_of([&] { mgr.get("s99"); }) == ErrorCode::not_found);
  }
  SUBCASE("isolation between sessions on one image") {
    auto a = mgr.create(o), b = mgr.create(o);
    CHECK(a->id() != b->id());
    CHECK(a->config_hash() == b->config_hash());
    const auto before = b->prediction().probabilities;
    a->submit_clicks({{5, 5, 1, ClickOrigin::human}});
    a->refine(RefineMode::disca);
    CHECK(a->parameters() != b->parameters());
    CHECK(b->prediction().probabilities == before);
    CHECK(b->clicks().empty());
  }
  SUBCASE("reads leave state untouched") {
    auto s = mgr.create(o);
    s->submit_clicks({{3, 4, 0, ClickOrigin::human}});
    s->refine(RefineMode::disca);
    const std::string h = s->state_hash();
    s->prediction();
    s->uncertainty(AcquisitionMethod::entropy);
    s->uncertainty(AcquisitionMethod::mc_dropout);
    s->uncertainty(AcquisitionMethod::odin);
    s->queries(StrategyKind::active, AcquisitionMethod::entropy, 3);
    s->queries(StrategyKind::random, std::nullopt, 3);
    s->summary();
    CHECK(s->state_hash() == h);
    CHECK(code_of([&] { s->uncertainty(AcquisitionMethod::confidnet); }) == ErrorCode::not_found);
  }
  SUBCASE("undo restores parameters bit for bit and tracks snapshot depth") {
    auto s = mgr.create(o);
    const auto initial = s->parameters();
    CHECK(s->undo_last()["undone"] == false);
    std::vector<std::vector<float>> history{initial};
    for (int i = 0; i < 3; ++i) {
      s->submit_clicks({{2 + 5 * i, 30 - 4 * i, i % 2, ClickOrigin::human}});
      s->refine(RefineMode::disca);
      history.push_back(s->parameters());
      CHECK(s->snapshot_depth() == static_cast<std::size_t>(i + 1));
    }
    for (int i = 3; i > 0; --i) {
      const json r = s->undo_last();
      CHECK(r["undone"] == true);
      CHECK(r["parameters_restored"] == true);
      CHECK(s->parameters() == history[i - 1]);
      CHECK(s->snapshot_depth() == static_cast<std::size_t>(i - 1));
    }
    // ac_only refines take no snapshot
    s->submit_clicks({{1, 1, 1, ClickOrigin::human}});
    s->refine(RefineMode::ac_only);
    CHECK(s->snapshot_depth() == 0);
    CHECK(s->undo_last()["parameters_restored"] == false);
    CHECK(s->parameters() == initial);
  }
  SUBCASE("snapshot stack is bounded") {
    auto s = mgr.create(o);
    for (std::size_t i = 0; i < kMaxSnapshots + 3; ++i) {
      s->submit_clicks({{static_cast<int>(i), static_cast<int>(i), 1, ClickOrigin::human}});
      s->refine(RefineMode::disca);
    }
    CHECK(s->snapshot_depth() == kMaxSnapshots);
  }
  SUBCASE("reset returns to the checkpoint") {
    auto s = mgr.create(o);
    const std::string h = s->state_hash();
    s->submit_clicks({{3, 3, 1, ClickOrigin::human}});
    s->refine(RefineMode::disca);
    s->reset();
    CHECK(s->state_hash() == h);
  }
  SUBCASE("queries follow the patch score oracle") {
    auto s = mgr.create(o);
    const auto qs = s->queries(StrategyKind::active, AcquisitionMethod::entropy, 3);
    REQUIRE(qs.size() == 3);
    const auto oracle = score_patches(entropy(s->prediction()), tile(40, 40, 24, 8));
    for (int i = 0; i < 3; ++i) {
      CHECK(qs[i].index == oracle[i].index);
      CHECK(qs[i].score == doctest::Approx(oracle[i].score));
    }
    s->submit_clicks({{oracle[0].window.row + 1, oracle[0].window.col + 1, 0, ClickOrigin::human}});
    for (const auto& q : s->queries(StrategyKind::active, AcquisitionMethod::entropy, 10))
      CHECK(!q.window.contains(oracle[0].window.row + 1, oracle[0].window.col + 1));
    CHECK(code_of([&] { s->queries(StrategyKind::whole_image_oracle, std::nullopt, 3); }) ==
          ErrorCode::invalid_argument);
  }
  SUBCASE("invalid clicks are rejected") {
    auto s = mgr.create(o);
    CHECK(code_of([&] { s->submit_clicks({{40, 0, 0, ClickOrigin::human}}); }) == ErrorCode::validation);
    CHECK(code_of([&] { s->submit_clicks({{0, 0, 2, ClickOrigin::human}}); }) == ErrorCode::validation);
    CHECK(s->clicks().empty());
  }
  SUBCASE("a second mutation while a refine runs is busy") {
    SessionOptions slow = o;
    slow.disca.steps = 400;
    auto s = mgr.create(slow);
    s->submit_clicks({{5, 5, 1, ClickOrigin::human}});
    std::atomic<bool> done{false};
    std::thread worker([&] {
      for (;;) {
        try {
          s->refine(RefineMode::disca);
          break;
        } catch (const Error& err) {
          if (err.code() != ErrorCode::busy) throw;
        }
      }
      done = true;
    });
    bool busy = false;
    while (!done && !busy) {
      try {
        s->submit_clicks({{6, 6, 1, ClickOrigin::human}});
      } catch (const Error& err) {
        busy = err.code() == ErrorCode::busy;
      }
    }
    worker.join();
    CHECK(busy);
  }
  SUBCASE("sequential sessions continue from a previous one") {
    auto a = mgr.create(o);
    a->submit_clicks({{5, 5, 1, ClickOrigin::human}});
    a->refine(RefineMode::disca);
    SessionOptions next = o;
    next.weight_policy = WeightPolicy::sequential;
    next.continue_from = a->id();
    CHECK(mgr.create(next)->parameters() == a->parameters());
    CHECK(mgr.erase(a->id()));
    CHECK_FALSE(mgr.erase(a->id()));
  }
}

TEST_CASE("HTTP API") {
  const Env e = make_env("http");
  SessionManager mgr(e.dir / "store");
  httplib::Server server;
  install_routes(server, mgr);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  struct Stop {
    httplib::Server& s;
    std::thread& t;
    ~Stop() {
      s.stop();
      t.join();
    }
  } stop{server, t};
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  json openapi = json::parse(slurp(std::filesystem::path(CLICKSEG_SOURCE_DIR) / "api" / "openapi.json"));
  auto schema_of = [&](const std::string& path, const std::string& method, const std::string& status) {
    auto resolve = [&](json node) {
      while (node.is_object() && node.contains("$ref")) {
        json::json_pointer ptr(node["$ref"].get<std::string>().substr(1));
        node = openapi.at(ptr);
      }
      return node;
    };
    const json response = resolve(openapi["paths"][path][method]["responses"][status]);
    if (!response.is_object() || !response.contains("content")) return json();
    return resolve(response["content"]["application/json"]["schema"]);
  };
  auto conforms = [&](const json& body, const std::string& path, const std::string& method,
                      const std::string& status) {
    const json s = schema_of(path, method, status);
    REQUIRE_MESSAGE(s.is_object(), "no schema for " << method << " " << path << " " << status);
    for (const auto& field : s.value("required", json::array()))
      CHECK_MESSAGE(body.contains(field.get<std::string>()), path << " misses " << field);
  };

  auto post_bytes = [&](const std::string& route, const std::string& bytes) {
    auto r = cli.Post(route, bytes, "application/octet-stream");
    REQUIRE(r);
    return std::make_pair(r->status, json::parse(r->body));
  };
  auto call = [&](const std::string& verb, const std::string& route, const json& body = json::object()) {
    httplib::Result r = verb == "GET"      ? cli.Get(route)
                        : verb == "DELETE" ? cli.Delete(route)
                                           : cli.Post(route, body.dump(), "application/json");
    REQUIRE(r);
    return std::make_pair(r->status, json::parse(r->body));
  };

  auto [s1, img] = post_bytes("/images", e.image_bytes);
  CHECK(s1 == 201);
  conforms(img, "/images", "post", "201");
  auto [s2, ck] = post_bytes("/checkpoints", e.checkpoint_bytes);
  CHECK(s2 == 201);
  conforms(ck, "/checkpoints", "post", "201");
  auto [bad_status, bad_body] = post_bytes("/images", "nope");
  CHECK(bad_status == 400);
  conforms(bad_body, "/images", "post", "400");
  CHECK(bad_body["error"]["code"] == "validation");

  const json create{{"checkpoint_id", ck["checkpoint_id"]}, {"image_id", img["image_id"]}, {"tile_size", 24},
                    {"overlap", 8}};
  auto [s3, sess] = call("POST", "/sessions", create);
  REQUIRE(s3 == 201);
  conforms(sess, "/sessions", "post", "201");
  const std::string base = "/sessions/" + sess["session_id"].get<std::string>();
  const json hash = sess["config_hash"];

  json missing = create;
  missing["checkpoint_id"] = std::string(64, 'f');
  auto [s4, nf] = call("POST", "/sessions", missing);
  CHECK(s4 == 404);
  CHECK(nf["error"]["message"].get<std::string>().find(std::string(64, 'f')) != std::string::npos);

  struct Step {
    std::string verb, suffix, spec_path;
    json body;
  };
  const std::vector<Step> steps{
      {"GET", "", "/sessions/{id}", {}},
      {"POST", "/clicks", "/sessions/{id}/clicks", {{"clicks", {{{"row", 4}, {"col", 5}, {"class_id", 1}}}}}},
      {"POST", "/refine", "/sessions/{id}/refine", {{"mode", "disca"}}},
      {"GET", "/prediction", "/sessions/{id}/prediction", {}},
      {"GET", "/uncertainty?method=odin", "/sessions/{id}/uncertainty", {}},
      {"GET", "/queries?strategy=entropy&k=3", "/sessions/{id}/queries", {}},
      {"POST", "/undo", "/sessions/{id}/undo", {}},
      {"POST", "/reset", "/sessions/{id}/reset", {}},
  };
  for (const auto& st : steps) {
    CAPTURE(st.suffix);
    auto [status, body] = call(st.verb, base + st.suffix, st.body);
    CHECK(status == 200);
    std::string method = st.verb;
    std::transform(method.begin(), method.end(), method.begin(), ::tolower);
    conforms(body, st.spec_path, method, "200");
    CHECK(body["config_hash"] == hash);
    if (st.suffix == "/prediction") {
      const std::string idx = base64_decode(body["indices"].get<std::string>());
      CHECK(idx.size() == 40u * 40u);
      CHECK(body["palette"].size() == 2);
    }
    if (st.suffix.starts_with("/uncertainty"))
      CHECK(base64_decode(body["scores"].get<std::string>()).size() == 40u * 40u * sizeof(float));
    if (st.suffix.starts_with("/queries")) CHECK(body["queries"].size() == 3);
  }

  auto [s5, v1] = call("POST", base + "/clicks", {{"clicks", "nope"}});
  CHECK(s5 == 400);
  auto [s6, v2] = call("POST", base + "/clicks", {{"clicks", {{{"row", 99}, {"col", 0}, {"class_id", 0}}}}});
  CHECK(s6 == 400);
  auto [s7, v3] = call("POST", base + "/refine", {{"mode", "wtp"}});
  CHECK(s7 == 400);
  auto [s8, v4] = call("GET", base + "/uncertainty?method=confidnet");
  CHECK(s8 == 404);
  auto [s9, v5] = call("GET", base + "/queries?k=x");
  CHECK(s9 == 400);
  auto [s10, gone] = call("DELETE", base);
  CHECK(s10 == 200);
  conforms(gone, "/sessions/{id}", "delete", "200");
  auto [s11, v6] = call("GET", base);
  CHECK(s11 == 404);
  conforms(v6, "/sessions/{id}", "get", "404");

  for (auto& [path, ops] : openapi["paths"].items())
    for (auto& [verb, op] : ops.items())
      if (verb != "parameters") CHECK_MESSAGE(op.contains("responses"), path << " " << verb);
  CHECK(http_status(ErrorCode::busy) == 409);
  CHECK(http_status(ErrorCode::mismatch) == 422);

}

TEST_SUITE("fixture") {
  TEST_CASE("an ac-only refine adopts the clicked class at the click") {
    const auto dir = testsupport::scratch_dir("service_fixture");
    SessionManager mgr(dir / "store");
    const ToyPreset p = toy_preset();
    ToyConfig cfg = p.test;
    cfg.count = 6;
    cfg.height = cfg.width = 96;
    const std::string ckpt = mgr.store().put_checkpoint_file(testsupport::fixture_checkpoint());
    for (const auto& [img, lab] : generate_toy(p.test_seed + 31, cfg)) {
      save_raster(dir / "img.png", img);
      SessionOptions o;
      o.checkpoint_id = ckpt;
      o.image_id = mgr.store().put_image_file(dir / "img.png");
      auto s = mgr.create(o);
      const auto comps = error_components(s->prediction(), lab);
      REQUIRE_FALSE(comps.empty());
      // max-error-center click
      const Pixel at = comps.front().interior;
      const ClickAnnotation click{at.row, at.col, lab.at(at.row, at.col), ClickOrigin::simulated};
      s->submit_clicks({click});
      s->refine(RefineMode::ac_only);
      CHECK(s->prediction().argmax()[static_cast<std::size_t>(at.row) * 96 + at.col] == click.class_id);
    }
  }
}
