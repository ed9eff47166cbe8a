#include <doctest.h>

#include <thread>

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include "aligndiff/service.hpp"

#include <httplib.h>

using namespace aligndiff;
using nlohmann::json;

namespace {

RegisteredCheckpoint random_checkpoint(const std::string& id) {
  RegisteredCheckpoint cp;
  cp.id = id;
  cp.config = apply_overrides(ExperimentConfig{}, {"model.hidden=16", "eval.steps=20",
                                                   "eval.checkpoint_steps=[1,4,8,12,16,20]"});
  Rng rng(1);
  cp.model = {init_params<float>(cp.config.model, rng), TargetKind::x0};
  return cp;
}

json post(Service& s, const std::string& path, const json& body, int expect = 200) {
  auto [status, out] = s.handle("POST", path, body.dump());
  CHECK_MESSAGE(status == expect, out.dump());
  return out;
}

long long on_pixels(const json& rle) {
  long long n = 0;
  const auto counts = rle["counts"].get<std::vector<int>>();
  for (std::size_t i = 1; i < counts.size(); i += 2) n += counts[i];
  return n;
}

}  // namespace

TEST_CASE("session lifecycle through the router") {
  Service svc;
  svc.add_checkpoint(random_checkpoint("toy"));

  auto [st, list] = svc.handle("GET", "/api/checkpoints", "");
  CHECK(st == 200);
  CHECK(list["checkpoints"][0]["id"] == "toy");

  auto [st2, scenes] = svc.handle("GET", "/api/scenes", "", {{"seed", "3"}, {"count", "2"}});
  CHECK(st2 == 200);
  REQUIRE(scenes["scenes"].size() == 2);
  const json scene0 = scenes["scenes"][0];
  CHECK(base64_decode(scene0["image_b64"]).size() > 8);
  CHECK(rle_decode(rle_from_json(scene0["mask_rle"])).cast<int>().sum() > 0);

  const json created = post(svc, "/api/sessions", {{"checkpoint_id", "toy"}, {"scene_seed", 3}});
  const std::string id = created["session_id"];
  CHECK(created["seed"] == derive_seed(3, 0));

  const json run = post(svc, "/api/sessions/" + id + "/run", json::object());
  REQUIRE(run["frames"].size() == 6);
  int prev_t = 1 << 30;
  for (const auto& f : run["frames"]) {
    CHECK(f["t"].get<int>() < prev_t);
    prev_t = f["t"];
    const Mask m = rle_decode(rle_from_json(f["mask_rle"]));
    CHECK(m.cast<long long>().sum() == on_pixels(f["mask_rle"]));
  }
  CHECK(run["provenance"]["weights"]["w_I"] == 1.5);
  CHECK(run["provenance"]["steps"] == 20);

  // Same seed reproduces the same result.
  const json again = post(svc, "/api/sessions/" + id + "/run", json::object());
  CHECK(again["final_mask_rle"] == run["final_mask_rle"]);

  const json custom = post(svc, "/api/sessions/" + id + "/run",
                           {{"steps", 10}, {"checkpoints", {1000, 500, 100}},
                            {"weights", {{"w_I", 1.0}, {"w_D", 5.0}}}});
  CHECK(custom["frames"].size() == 3);
  CHECK(custom["provenance"]["weights"]["w_D"] == 5.0);

  const json advice = post(svc, "/api/sessions/" + id + "/advise", {{"k", 2}});
  CHECK(advice["negatives"].is_array());
  CHECK(advice["negatives"].size() <= 2);
  if (!advice["negatives"].empty()) {
    const json neg = post(svc, "/api/sessions/" + id + "/run", {{"negative", advice["negatives"][0]}, {"steps", 10}});
    CHECK(neg["provenance"]["negative"]["negated"] == true);
  }

  const json wf = post(svc, "/api/sessions/" + id + "/workflow", {{"k", 3}, {"steps", 10}});
  CHECK(wf.contains("mask_rle"));
  CHECK(wf["provenance"].contains("seeds"));
  CHECK(wf["provenance"]["weights"]["w_D_neg"] == 2.0);
}

TEST_CASE("explicit conditions") {
  Service svc;
  svc.add_checkpoint(random_checkpoint("toy"));
  // A scene with two red squares: "red square" is ambiguous, "left red square" is not.
  auto [st, scenes] = svc.handle("GET", "/api/scenes", "", {{"seed", "0"}, {"count", "64"}});
  REQUIRE(st == 200);
  bool tried = false;
  for (const auto& sc : scenes["scenes"]) {
    const json objects = sc["objects"];
    for (std::size_t i = 0; i < objects.size() && !tried; ++i) {
      for (std::size_t j = i + 1; j < objects.size() && !tried; ++j) {
        if (objects[i]["shape"] != objects[j]["shape"] || objects[i]["color"] != objects[j]["color"]) continue;
        const json cond{{"shape", objects[i]["shape"]}, {"color", objects[i]["color"]}};
        post(svc, "/api/sessions", {{"checkpoint_id", "toy"}, {"scene_seed", sc["seed"]}, {"condition", cond}}, 422);
        tried = true;
      }
    }
  }
  CHECK(tried);
}

TEST_CASE("error statuses") {
  Service svc;
  svc.add_checkpoint(random_checkpoint("toy"));
  CHECK(svc.handle("POST", "/api/sessions", "{not json").first == 400);
  CHECK(svc.handle("POST", "/api/sessions", "{not json").second["code"] == "malformed_json");
  CHECK(svc.handle("POST", "/api/sessions", R"({"checkpoint_id":"nope","scene_seed":1})").first == 404);
  CHECK(svc.handle("POST", "/api/sessions/s999/run", "{}").first == 404);
  CHECK(svc.handle("GET", "/api/unknown", "").first == 404);
  CHECK(svc.handle("POST", "/api/sessions", R"({"checkpoint_id":"toy"})").first == 422);
  CHECK(svc.handle("GET", "/api/scenes", "", {{"count", "0"}}).first == 422);
  CHECK(svc.handle("GET", "/api/scenes", "", {{"seed", "abc"}}).first == 400);

  const json created = post(svc, "/api/sessions", {{"checkpoint_id", "toy"}, {"scene_seed", 1}});
  const std::string run = "/api/sessions/" + created["session_id"].get<std::string>() + "/run";
  CHECK(svc.handle("POST", run, R"({"steps": 0})").first == 422);
  CHECK(svc.handle("POST", run, R"({"checkpoints": [999]})").first == 422);
  CHECK(svc.handle("POST", run, R"({"weights": {"w_X": 1}})").first == 422);
  CHECK(svc.handle("POST", run, R"({"negative": {"shape": "hexagon"}})").first == 422);
}

TEST_CASE("live HTTP server on an ephemeral port") {
  Service svc;
  svc.add_checkpoint(random_checkpoint("toy"));
  REQUIRE(svc.bind("127.0.0.1", 0));
  std::thread server([&] { svc.listen_after_bind(); });
  httplib::Client client("127.0.0.1", svc.port());
  client.set_read_timeout(60, 0);

  auto res = client.Get("/api/checkpoints");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
  CHECK(json::parse(res->body)["checkpoints"].size() == 1);

  auto bad = client.Post("/api/sessions", "{oops", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);

  auto missing = client.Post("/api/sessions/zzz/advise", "{}", "application/json");
  REQUIRE(missing);
  CHECK(missing->status == 404);

  auto created = client.Post("/api/sessions", R"({"checkpoint_id":"toy","scene_seed":4})", "application/json");
  REQUIRE(created);
  REQUIRE(created->status == 200);
  const std::string id = json::parse(created->body)["session_id"];

  // Concurrent runs on one session serialize and agree.
  json results[2];
  std::thread a([&] {
    httplib::Client c("127.0.0.1", svc.port());
    c.set_read_timeout(60, 0);
    auto r = c.Post("/api/sessions/" + id + "/run", R"({"steps": 10})", "application/json");
    if (r) results[0] = json::parse(r->body);
  });
  std::thread b([&] {
    httplib::Client c("127.0.0.1", svc.port());
    c.set_read_timeout(60, 0);
    auto r = c.Post("/api/sessions/" + id + "/run", R"({"steps": 10})", "application/json");
    if (r) results[1] = json::parse(r->body);
  });
  a.join();
  b.join();
  REQUIRE(results[0].contains("final_mask_rle"));
  CHECK(results[0]["final_mask_rle"] == results[1]["final_mask_rle"]);

  svc.stop();
  server.join();
}
