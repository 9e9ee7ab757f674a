#include "msc/commands.hpp"
#include "msc/service.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <numbers>

using namespace msc;

namespace {

struct Recorder {
  std::vector<std::pair<int, Json>> sent;
  SimLoop::Send sink() {
    return [this](int c, const std::string& t) { sent.emplace_back(c, Json::parse(t)); };
  }
  std::vector<Json> of_type(const std::string& type, int client = SimLoop::kBroadcast) const {
    std::vector<Json> out;
    for (const auto& [c, j] : sent)
      if (c == client && j["type"] == type) out.push_back(j);
    return out;
  }
  void clear() { sent.clear(); }
};

Scene torus() { return load_scene(MSC_PRESETS "/fig_validation_torus.json"); }

void tick_n(SimLoop& loop, int n) {
  for (int i = 0; i < n; ++i) loop.tick();
}

}  // namespace

TEST(Base64, RoundTrip) {
  for (std::size_t len = 0; len < 20; ++len) {
    std::string bytes;
    for (std::size_t i = 0; i < len; ++i) bytes.push_back(static_cast<char>(i * 37 + 11));
    const std::string enc = base64_encode(bytes.data(), bytes.size());
    EXPECT_EQ(enc.size() % 4, 0u);
    EXPECT_EQ(base64_decode(enc), bytes);
  }
  EXPECT_EQ(base64_encode("Man", 3), "TWFu");
  EXPECT_EQ(base64_encode("Ma", 2), "TWE=");
  const VecX v = VecX::LinSpaced(9, -1.5, 2.25);
  EXPECT_EQ(decode_f64(encode_f64(v)), v);
  double one = 1.0;
  unsigned char raw[8];
  std::memcpy(raw, &one, 8);
  EXPECT_EQ(raw[7], 0x3f);  // little-endian layout on the wire
  EXPECT_EQ(base64_decode(encode_f64(VecX::Constant(1, 1.0))), std::string(reinterpret_cast<char*>(raw), 8));
  EXPECT_THROW(base64_decode("abc"), ConfigError);
}

TEST(SimLoop, HelloIsSelfDescribing) {
  Recorder rec;
  SimLoop loop(torus(), 1, rec.sink());
  loop.connect(3);
  loop.tick();
  ASSERT_EQ(rec.sent.size(), 2u);
  const Json& hello = rec.sent[0].second;
  EXPECT_EQ(rec.sent[0].first, 3);
  EXPECT_EQ(hello["type"], "hello");
  EXPECT_EQ(hello["protocol"], kProtocolVersion);
  EXPECT_EQ(hello["n"], 145);
  EXPECT_EQ(hello["h"], 0.015);
  EXPECT_EQ(hello["playing"], false);
  EXPECT_DOUBLE_EQ(hello["groups"]["all"].get<double>(), 6.0);
  const Json& frame = rec.sent[1].second;
  EXPECT_EQ(frame["type"], "frame");
  EXPECT_EQ(frame["index"], 0);
  EXPECT_EQ(frame["n"], 145);
  EXPECT_EQ(decode_f64(frame["positions"].get<std::string>()), loop.simulator().state().positions);
  for (const char* k : {"kinetic", "elastic", "coulomb", "external", "total"}) EXPECT_TRUE(frame["energy"].contains(k));
}

TEST(SimLoop, NoControlsMatchesBatchRunBitwise) {
  Scene sc = torus();
  sc.steps = 40;
  const Trajectory ref = run_scene(sc);
  Recorder rec;
  SimLoop loop(sc, 1, rec.sink());
  loop.submit(0, R"({"type":"play"})");
  tick_n(loop, 40);
  const auto frames = rec.of_type("frame");
  ASSERT_EQ(frames.size(), 40u);
  for (std::size_t k = 0; k < frames.size(); ++k) {
    EXPECT_EQ(frames[k]["index"], static_cast<long>(k + 1));
    EXPECT_EQ(decode_f64(frames[k]["positions"].get<std::string>()), ref.states[k + 1].positions);
    EXPECT_EQ(frames[k]["time"].get<double>(), ref.states[k + 1].time);
  }
}

TEST(SimLoop, StepCountAndMonotoneSequence) {
  Recorder rec;
  SimLoop loop(torus(), 1, rec.sink());
  loop.submit(1, R"({"type":"step","count":3,"id":"a"})");
  tick_n(loop, 10);
  const auto acks = rec.of_type("ack", 1);
  ASSERT_EQ(acks.size(), 1u);
  EXPECT_EQ(acks[0]["request"], "step");
  EXPECT_EQ(acks[0]["id"], "a");
  EXPECT_EQ(acks[0]["applied_at_frame"], 0);
  const auto frames = rec.of_type("frame");
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(loop.frame(), 3);
  loop.submit(1, R"({"type":"reset"})");
  loop.submit(1, R"({"type":"step"})");
  tick_n(loop, 3);
  const auto all = rec.of_type("frame");
  for (std::size_t k = 1; k < all.size(); ++k) EXPECT_GT(all[k]["seq"].get<long>(), all[k - 1]["seq"].get<long>());
  EXPECT_EQ(all.back()["index"], 1);
}

TEST(SimLoop, Throttle) {
  Recorder rec;
  SimLoop loop(torus(), 3, rec.sink());
  loop.submit(0, R"({"type":"step","count":7})");
  tick_n(loop, 7);
  const auto frames = rec.of_type("frame");
  ASSERT_EQ(frames.size(), 2u);
  EXPECT_EQ(frames[0]["index"], 3);
  EXPECT_EQ(frames[1]["index"], 6);
  EXPECT_EQ(loop.frame(), 7);
  EXPECT_THROW(SimLoop(torus(), 0, rec.sink()), ConfigError);
}

TEST(SimLoop, ControlTakesEffectOnNextStep) {
  const Scene sc = torus();
  Recorder rec;
  SimLoop loop(sc, 1, rec.sink());
  loop.submit(0, R"({"type":"step","count":5})");
  tick_n(loop, 5);
  loop.submit(0, R"({"type":"set_group_charge","group":"all","q_uC":12})");
  loop.submit(0, R"({"type":"step","count":2})");
  tick_n(loop, 2);
  const auto acks = rec.of_type("ack", 0);
  ASSERT_EQ(acks.size(), 3u);
  EXPECT_EQ(acks[1]["request"], "set_group_charge");
  EXPECT_EQ(acks[1]["applied_at_frame"], 5);

  Simulator unchanged = make_simulator(sc);
  for (int i = 0; i < 5; ++i) unchanged.step();
  Simulator changed = unchanged;
  changed.set_charges(VecX::Constant(145, 12e-6));
  changed.step();
  const SimState at5 = unchanged.state();
  unchanged.step();
  const auto frames = rec.of_type("frame");
  ASSERT_EQ(frames.size(), 7u);
  EXPECT_EQ(decode_f64(frames[4]["positions"].get<std::string>()), at5.positions);
  EXPECT_EQ(decode_f64(frames[5]["positions"].get<std::string>()), changed.state().positions);
  EXPECT_NE(changed.state().positions, unchanged.state().positions);
  EXPECT_DOUBLE_EQ(frames[5]["group_charges_uC"]["all"].get<double>(), 12.0);
  const double e_old = total_energy(unchanged.state(), unchanged.model(), unchanged.params()).coulomb;
  EXPECT_NEAR(frames[5]["energy"]["coulomb"].get<double>(), 4.0 * e_old, 0.05 * 4.0 * e_old);
}

TEST(SimLoop, PauseStopsFramesButAcks) {
  Recorder rec;
  SimLoop loop(torus(), 1, rec.sink());
  loop.submit(0, R"({"type":"play"})");
  tick_n(loop, 3);
  loop.submit(0, R"({"type":"pause"})");
  loop.tick();
  rec.clear();
  loop.submit(0, R"({"type":"set_timestep","h":0.01})");
  loop.submit(0, R"({"type":"add_external_charge","position":[6,0,0],"q_uC":-5})");
  tick_n(loop, 5);
  EXPECT_TRUE(rec.of_type("frame").empty());
  const auto acks = rec.of_type("ack", 0);
  ASSERT_EQ(acks.size(), 2u);
  EXPECT_EQ(acks[0]["h"], 0.01);
  EXPECT_EQ(acks[1]["charge_id"], 0);
  EXPECT_EQ(loop.simulator().params().h, 0.01);
  EXPECT_EQ(loop.frame(), 3);
}

TEST(SimLoop, ExternalChargeLifecycle) {
  Recorder rec;
  SimLoop loop(torus(), 1, rec.sink());
  loop.submit(0, R"({"type":"add_external_charge","position":[6,0,0],"q_uC":-5,"charge_id":4})");
  loop.submit(0, R"({"type":"move_external_charge","charge_id":4,"position":[0,6,0],"q_uC":3})");
  loop.tick();
  const auto& ext = loop.simulator().model().forcing.external_charges;
  ASSERT_EQ(ext.size(), 1u);
  EXPECT_EQ(ext[0].position, Vec3(0, 6, 0));
  EXPECT_DOUBLE_EQ(ext[0].charge, 3e-6);
  loop.submit(0, R"({"type":"add_external_charge","position":[1,1,1],"q_uC":1,"charge_id":4})");
  loop.submit(0, R"({"type":"remove_external_charge","charge_id":4})");
  loop.submit(0, R"({"type":"remove_external_charge","charge_id":4})");
  loop.tick();
  EXPECT_TRUE(loop.simulator().model().forcing.external_charges.empty());
  EXPECT_EQ(rec.of_type("error", 0).size(), 2u);
}

TEST(SimLoop, MalformedMessagesAnswerOnlyTheSender) {
  Recorder rec;
  SimLoop loop(torus(), 1, rec.sink());
  const std::vector<std::string> bad = {
      "{not json",
      R"([1,2])",
      R"({"type":"warp"})",
      R"({"type":"set_group_charge","group":"nope","q_uC":1,"id":9})",
      R"({"type":"set_group_charge","group":"all"})",
      R"({"type":"set_timestep","h":-1})",
      R"({"type":"step","count":0})",
      R"({"type":"move_external_charge","charge_id":99,"position":[0,0,0]})",
      R"({"type":"load_scene","path":"/nonexistent.json"})",
  };
  for (const std::string& m : bad) loop.submit(7, m);
  loop.tick();
  ASSERT_EQ(rec.sent.size(), bad.size());
  for (const auto& [client, j] : rec.sent) {
    EXPECT_EQ(client, 7);
    EXPECT_EQ(j["type"], "error");
    EXPECT_EQ(j["kind"], "bad_request");
    EXPECT_FALSE(j["message"].get<std::string>().empty());
  }
  EXPECT_EQ(rec.sent[3].second["id"], 9);
  EXPECT_EQ(rec.sent[3].second["request"], "set_group_charge");
  EXPECT_EQ(loop.frame(), 0);
  EXPECT_EQ(loop.simulator().params().h, 0.015);
  EXPECT_DOUBLE_EQ(loop.simulator().model().charges.charges[0], 6e-6);
}

TEST(SimLoop, LoadSceneInline) {
  Recorder rec;
  SimLoop loop(torus(), 1, rec.sink());
  loop.submit(2, R"({"type":"load_scene","scene":{"version":1,"name":"pair","vertices":[[0,0,0],[1,0,0]],"k":1}})");
  loop.tick();
  EXPECT_EQ(loop.scene().name, "pair");
  EXPECT_EQ(loop.simulator().state().vertex_count(), 2);
  const auto hellos = rec.of_type("hello");
  ASSERT_EQ(hellos.size(), 1u);
  EXPECT_EQ(hellos[0]["n"], 2);
  EXPECT_EQ(rec.of_type("ack", 2).size(), 1u);
}

TEST(SimLoop, DivergencePausesAtLastFiniteFrame) {
  Scene sc = torus();
  sc.integrator = IntegratorKind::Verlet;
  sc.params.h = 0.6;
  sc.initial = SimState::from_positions(sc.initial.positions, sc.initial.velocities, 0.6);
  Recorder rec;
  SimLoop loop(sc, 1, rec.sink());
  loop.submit(0, R"({"type":"play"})");
  for (int i = 0; i < 2000 && rec.of_type("error").empty(); ++i) loop.tick();
  const auto errors = rec.of_type("error");
  ASSERT_EQ(errors.size(), 1u);
  EXPECT_EQ(errors[0]["kind"], "divergence");
  EXPECT_FALSE(loop.playing());
  EXPECT_TRUE(loop.simulator().state().finite());
  const long at = loop.frame();
  EXPECT_EQ(errors[0]["frame"], at + 1);
  const auto frames = rec.of_type("frame");
  ASSERT_FALSE(frames.empty());
  EXPECT_EQ(frames.back()["index"], at);
  loop.tick();
  EXPECT_EQ(loop.frame(), at);
}

TEST(SimLoop, OrbitingChargeAttractsNearestVertices) {
  Scene sc = load_scene(MSC_PRESETS "/fig_external_charge_torus.json");
  sc.model.forcing.external_charges.clear();
  constexpr int kSettle = 400;  // let the self-repulsion transient die out first
  constexpr int kSteps = 600;
  constexpr int kEarly = 60;        // direction check window, before the charged body drifts as a whole
  constexpr double kRadius = 24.0;  // outside the settled ring
  auto orbit = [](int k) {
    const double a = 2.0 * std::numbers::pi * k / kSteps;
    return Vec3(kRadius * std::cos(a), kRadius * std::sin(a), 0.0);
  };
  auto run = [&](double q_uC, std::vector<VecX>& out) {
    Recorder rec;
    SimLoop loop(sc, 1, rec.sink());
    loop.submit(0, Json{{"type", "step"}, {"count", kSettle}}.dump());
    tick_n(loop, kSettle);
    rec.clear();
    loop.submit(0, Json{{"type", "add_external_charge"}, {"position", {kRadius, 0.0, 0.0}}, {"q_uC", q_uC}}.dump());
    for (int k = 0; k < kSteps; ++k) {
      const Vec3 p = orbit(k);
      loop.submit(0, Json{{"type", "move_external_charge"}, {"charge_id", 0}, {"position", {p.x(), p.y(), p.z()}}}.dump());
      loop.submit(0, R"({"type":"step"})");
      loop.tick();
    }
    for (const Json& f : rec.of_type("frame")) out.push_back(decode_f64(f["positions"].get<std::string>()));
    ASSERT_EQ(out.size(), static_cast<std::size_t>(kSteps));
  };
  std::vector<VecX> base, attract, repel;
  run(0.0, base);
  for (int i = 0; i < 145; ++i) ASSERT_LT(base.front().segment<3>(3 * i).norm(), kRadius - 2.0);
  run(-42.0, attract);
  run(42.0, repel);

  // Nearest vertices to the charge at each frame; jitter is their largest baseline per-step motion.
  double jitter = 0.0, pulled = 0.0, pushed = 0.0;
  int toward = 0, away = 0, frames = 0, counted = 0;
  for (int k = 1; k < kSteps; ++k) {
    double pull = 0.0, push = 0.0;
    const Vec3 c = orbit(k);
    std::vector<std::pair<double, int>> d;
    for (int i = 0; i < 145; ++i) d.emplace_back((base[k].segment<3>(3 * i) - c).norm(), i);
    std::partial_sort(d.begin(), d.begin() + 5, d.end());
    for (int r = 0; r < 5; ++r) {
      const int i = d[r].second;
      const Vec3 xb = base[k].segment<3>(3 * i);
      jitter = std::max(jitter, (xb - base[k - 1].segment<3>(3 * i)).norm());
      pulled += (attract[k].segment<3>(3 * i) - xb).norm();
      pushed += (repel[k].segment<3>(3 * i) - xb).norm();
      const Vec3 dir = (c - xb).normalized();
      pull += (attract[k].segment<3>(3 * i) - xb).dot(dir);
      push += (repel[k].segment<3>(3 * i) - xb).dot(dir);
      ++counted;
    }
    if (k < kEarly) {
      toward += pull > 0.0;
      away += push < 0.0;
      ++frames;
    }
  }
  pulled /= counted;
  pushed /= counted;
  EXPECT_GT(pulled, 5.0 * jitter) << "jitter " << jitter;
  EXPECT_GT(pushed, 5.0 * jitter) << "jitter " << jitter;
  EXPECT_GT(toward, 0.9 * frames);
  EXPECT_GT(away, 0.9 * frames);
}

TEST(Server, WebsocketRoundTrip) {
  net::Server server(torus(), 0, 1, "127.0.0.1");
  server.start();
  net::Client a("127.0.0.1", server.port());
  const Json hello = a.receive();
  EXPECT_EQ(hello["type"], "hello");
  EXPECT_EQ(hello["n"], 145);
  const Json f0 = a.receive();
  EXPECT_EQ(f0["type"], "frame");
  EXPECT_EQ(f0["index"], 0);

  net::Client b("127.0.0.1", server.port());
  b.receive_until([](const Json& j) { return j["type"] == "frame"; });

  a.send({{"type", "step"}, {"count", 2}, {"id", 5}});
  std::vector<Json> skipped;
  const Json ack = a.receive_until([](const Json& j) { return j["type"] == "ack"; }, &skipped);
  EXPECT_EQ(ack["id"], 5);
  long last = 0;
  for (const Json& j : skipped)
    if (j["type"] == "frame") last = j["index"];
  while (last < 2) {
    const Json j = a.receive_until([](const Json& m) { return m["type"] == "frame"; });
    EXPECT_GT(j["index"].get<long>(), last);
    last = j["index"];
    EXPECT_EQ(decode_f64(j["positions"].get<std::string>()).size(), 3 * 145);
  }
  const Json fb1 = b.receive_until([](const Json& j) { return j["type"] == "frame"; });
  EXPECT_EQ(fb1["index"], 1);
  const Json fb2 = b.receive_until([](const Json& j) { return j["type"] == "frame"; });
  EXPECT_EQ(fb2["index"], 2);

  b.send(Json::parse(R"({"type":"warp","id":1})"));
  const Json err = b.receive();
  EXPECT_EQ(err["type"], "error");
  EXPECT_EQ(err["id"], 1);
  a.send({{"type", "pause"}, {"id", 6}});
  const Json ack2 = a.receive();  // a never sees b's error
  EXPECT_EQ(ack2["type"], "ack");
  EXPECT_EQ(ack2["id"], 6);
  a.close();
  b.close();
  server.stop();
}

TEST(Server, RejectsOtherTargets) {
  net::Server server(torus(), 0, 1, "127.0.0.1");
  server.start();
  EXPECT_ANY_THROW(net::Client("127.0.0.1", server.port(), "/other"));

  namespace http = boost::beast::http;
  boost::asio::io_context io;
  boost::asio::ip::tcp::socket sock(io);
  sock.connect({boost::asio::ip::make_address("127.0.0.1"), server.port()});
  http::request<http::empty_body> req(http::verb::get, "/", 11);
  req.set(http::field::host, "localhost");
  http::write(sock, req);
  boost::beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(sock, buf, res);
  EXPECT_EQ(res.result(), http::status::not_found);
  server.stop();
}
