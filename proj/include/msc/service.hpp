#pragma once

// Live simulation service: one simulation loop, JSON control messages in,
// frame snapshots out. Message schemas are documented in PROTOCOL.md.

#include "msc/scene.hpp"

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <iostream>
#include <mutex>
#include <thread>

namespace msc {

inline constexpr int kProtocolVersion = 1;

inline std::string base64_encode(const void* data, std::size_t len) {
  namespace it = boost::archive::iterators;
  using Enc = it::base64_from_binary<it::transform_width<const unsigned char*, 6, 8>>;
  const auto* p = static_cast<const unsigned char*>(data);
  std::string out(Enc(p), Enc(p + len));
  out.append((3 - len % 3) % 3, '=');
  return out;
}

inline std::string base64_decode(std::string text) {
  namespace it = boost::archive::iterators;
  using Dec = it::transform_width<it::binary_from_base64<std::string::const_iterator>, 8, 6>;
  if (text.size() % 4 != 0) throw ConfigError("base64 length must be a multiple of 4");
  const std::size_t pad = text.empty() ? 0 : static_cast<std::size_t>(std::count(text.end() - 2, text.end(), '='));
  std::replace(text.end() - static_cast<std::ptrdiff_t>(pad), text.end(), '=', 'A');
  std::string out;
  try {
    out.assign(Dec(text.cbegin()), Dec(text.cend()));
  } catch (const std::exception&) {
    throw ConfigError("malformed base64");
  }
  out.resize(out.size() - pad);
  return out;
}

/// Little-endian f64 array as base64.
inline std::string encode_f64(const VecX& v) {
  std::string bytes(static_cast<std::size_t>(v.size()) * 8, '\0');
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v[i]);
    for (int b = 0; b < 8; ++b) bytes[static_cast<std::size_t>(8 * i + b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return base64_encode(bytes.data(), bytes.size());
}

inline VecX decode_f64(const std::string& text) {
  const std::string bytes = base64_decode(text);
  if (bytes.size() % 8 != 0) throw ConfigError("f64 payload length must be a multiple of 8");
  VecX v(static_cast<Eigen::Index>(bytes.size() / 8));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(8 * i + b)])) << (8 * b);
    v[i] = std::bit_cast<double>(bits);
  }
  return v;
}

/// The simulation side of the service. Transport-independent: messages arrive
/// through submit() from any thread; replies and frames leave through the send
/// callback (client id, or kBroadcast). Only the thread calling tick()/run()
/// touches the simulation.
class SimLoop {
 public:
  static constexpr int kBroadcast = -1;
  using Send = std::function<void(int client, const std::string& text)>;

  SimLoop(Scene scene, int throttle, Send send) : scene_(std::move(scene)), throttle_(throttle), send_(std::move(send)) {
    if (throttle_ < 1) throw ConfigError("throttle must be >= 1");
    rebuild();
  }

  void submit(int client, std::string text) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      inbox_.emplace_back(client, std::move(text));
    }
    cv_.notify_one();
  }

  /// Sends hello and the current frame to a newly connected client.
  void connect(int client) { submit(client, R"({"type":"hello"})"); }

  /// Applies every queued message, then performs at most one step.
  /// Returns true when a step was taken.
  bool tick() {
    drain();
    if (!playing_ && pending_steps_ == 0) return false;
    if (pending_steps_ > 0) --pending_steps_;
    return advance();
  }

  void run(const std::atomic<bool>& stop, double max_rate = 0.0) {
    using clock = std::chrono::steady_clock;
    auto next = clock::now();
    while (!stop.load()) {
      {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait_for(lock, std::chrono::milliseconds(20),
                     [&] { return !inbox_.empty() || playing_ || pending_steps_ > 0 || stop.load(); });
      }
      if (tick() && max_rate > 0.0) {
        next += std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / max_rate));
        const auto now = clock::now();
        if (next > now)
          std::this_thread::sleep_until(next);
        else
          next = now;
      }
    }
  }

  const Simulator& simulator() const { return *sim_; }
  const Scene& scene() const { return scene_; }
  bool playing() const { return playing_; }
  long frame() const { return sim_->step_index(); }

  Json frame_message() const {
    const SimState& s = sim_->state();
    const EnergyBreakdown e = total_energy(s, sim_->model(), sim_->params());
    Json j;
    j["type"] = "frame";
    j["seq"] = seq_;
    j["index"] = sim_->step_index();
    j["time"] = s.time;
    j["n"] = s.vertex_count();
    j["h"] = sim_->params().h;
    j["positions"] = encode_f64(s.positions);
    j["group_charges_uC"] = group_charges();
    j["external_charges"] = external_charges();
    j["energy"] = {{"kinetic", e.kinetic}, {"elastic", e.elastic}, {"coulomb", e.coulomb},
                   {"external", e.external_potential}, {"total", e.total}};
    return j;
  }

 private:
  void rebuild() {
    sim_ = std::make_unique<Simulator>(make_simulator(scene_));
    playing_ = false;
    pending_steps_ = 0;
  }

  Json group_charges() const {
    Json g = Json::object();
    const VecX& q = sim_->model().charges.charges;
    for (const auto& [name, idx] : scene_.groups)
      if (!idx.empty()) g[name] = q[idx.front()] / kMicroCoulomb;
    return g;
  }

  Json external_charges() const {
    Json a = Json::array();
    for (const ExternalCharge& e : sim_->model().forcing.external_charges)
      a.push_back({{"id", e.id},
                   {"position", {e.position.x(), e.position.y(), e.position.z()}},
                   {"q_uC", e.charge / kMicroCoulomb}});
    return a;
  }

  Json hello() const {
    Json j;
    j["type"] = "hello";
    j["protocol"] = kProtocolVersion;
    j["scene"] = scene_.name;
    j["n"] = sim_->state().vertex_count();
    j["h"] = sim_->params().h;
    j["frame"] = sim_->step_index();
    j["playing"] = playing_;
    j["throttle"] = throttle_;
    j["groups"] = group_charges();
    j["external_charges"] = external_charges();
    return j;
  }

  void emit(int client, const Json& j) { send_(client, j.dump()); }

  Json next_frame() {
    ++seq_;
    return frame_message();
  }

  bool advance() {
    try {
      sim_->step();
    } catch (const DivergenceError& e) {
      playing_ = false;
      pending_steps_ = 0;
      emit(kBroadcast, {{"type", "error"},
                        {"kind", "divergence"},
                        {"frame", sim_->step_index() + 1},
                        {"message", std::string(e.what()) + "; paused at the last finite frame"}});
      return false;
    }
    if (sim_->step_index() % throttle_ == 0) emit(kBroadcast, next_frame());
    return true;
  }

  void drain() {
    std::deque<std::pair<int, std::string>> batch;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      batch.swap(inbox_);
    }
    for (auto& [client, text] : batch) handle(client, text);
  }

  ExternalCharge* find_external(int id) {
    for (ExternalCharge& e : sim_->forcing().external_charges)
      if (e.id == id) return &e;
    return nullptr;
  }

  void handle(int client, const std::string& text) {
    Json msg;
    Json id;
    std::string type;
    try {
      msg = Json::parse(text);
      if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string())
        throw ConfigError("message must be an object with a string \"type\"");
      if (msg.contains("id")) id = msg["id"];
      type = msg["type"].get<std::string>();
      Json ack = apply(client, type, msg);
      if (ack.is_null()) return;
      ack["type"] = "ack";
      ack["request"] = type;
      ack["applied_at_frame"] = sim_->step_index();
      if (!id.is_null()) ack["id"] = id;
      emit(client, ack);
    } catch (const std::exception& e) {
      Json err = {{"type", "error"}, {"kind", "bad_request"}, {"message", e.what()}};
      if (!type.empty()) err["request"] = type;
      if (!id.is_null()) err["id"] = id;
      emit(client, err);
    }
  }

  /// Returns the ack payload, or null when the reply was already sent.
  Json apply(int client, const std::string& type, const Json& msg) {
    detail::Reader r(msg, type);
    if (type == "hello") {
      emit(client, hello());
      emit(client, next_frame());
      return nullptr;
    }
    if (type == "play") {
      playing_ = true;
      return Json::object();
    }
    if (type == "pause") {
      playing_ = false;
      pending_steps_ = 0;
      return Json::object();
    }
    if (type == "step") {
      const long count = r.integer("count", 1);
      if (count < 1) r.fail("count", "must be >= 1");
      pending_steps_ += count;
      return {{"count", count}};
    }
    if (type == "set_group_charge") {
      const std::string group = r.string("group", "");
      const double q = r.number("q_uC") * kMicroCoulomb;
      VecX charges = sim_->model().charges.charges;
      for (int v : scene_.group(group)) charges[v] = q;
      sim_->set_charge_schedule({});
      sim_->set_charges(charges);
      return {{"group", group}, {"q_uC", q / kMicroCoulomb}};
    }
    if (type == "add_external_charge") {
      ExternalCharge e;
      e.position = r.vec3("position", Vec3::Zero());
      e.charge = r.number("q_uC") * kMicroCoulomb;
      int next_id = 0;
      for (const ExternalCharge& c : sim_->model().forcing.external_charges) next_id = std::max(next_id, c.id + 1);
      e.id = static_cast<int>(r.integer("charge_id", next_id));
      if (find_external(e.id)) r.fail("charge_id", "already in use");
      sim_->forcing().external_charges.push_back(e);
      return {{"charge_id", e.id}};
    }
    if (type == "move_external_charge") {
      const int cid = static_cast<int>(r.integer("charge_id", -1));
      ExternalCharge* e = find_external(cid);
      if (!e) r.fail("charge_id", "no external charge with this id");
      if (!r.has("position")) r.fail("position", "missing");
      e->position = r.vec3("position", e->position);
      if (r.has("q_uC")) e->charge = r.number("q_uC") * kMicroCoulomb;
      return {{"charge_id", cid}};
    }
    if (type == "remove_external_charge") {
      const int cid = static_cast<int>(r.integer("charge_id", -1));
      auto& list = sim_->forcing().external_charges;
      auto it = std::find_if(list.begin(), list.end(), [&](const ExternalCharge& c) { return c.id == cid; });
      if (it == list.end()) r.fail("charge_id", "no external charge with this id");
      list.erase(it);
      return {{"charge_id", cid}};
    }
    if (type == "set_timestep") {
      const double h = r.number("h");
      if (!(h > 0.0)) r.fail("h", "must be > 0");
      sim_->set_timestep(h);
      return {{"h", h}};
    }
    if (type == "reset") {
      rebuild();
      emit(kBroadcast, hello());
      emit(kBroadcast, next_frame());
      return Json::object();
    }
    if (type == "load_scene") {
      Scene next;
      if (r.has("path"))
        next = load_scene(r.string("path", ""));
      else if (r.has("scene"))
        next = parse_scene_config(msg["scene"].dump());
      else
        r.fail("path", "give \"path\" or an inline \"scene\"");
      scene_ = std::move(next);
      rebuild();
      emit(kBroadcast, hello());
      emit(kBroadcast, next_frame());
      return {{"scene", scene_.name}, {"warnings", scene_.warnings}};
    }
    throw ConfigError("unknown message type '" + type + "'");
  }

  Scene scene_;
  int throttle_;
  Send send_;
  std::unique_ptr<Simulator> sim_;
  bool playing_ = false;
  long pending_steps_ = 0;
  long seq_ = 0;

  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::pair<int, std::string>> inbox_;
};

namespace net {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

/// Websocket front end for a SimLoop. All socket work runs on one I/O thread;
/// the loop runs on its own thread and hands outgoing text back via post().
class Server {
 public:
  static constexpr std::size_t kMaxQueuedFrames = 256;
  static constexpr int kNoClient = -2;

  Server(Scene scene, unsigned short port, int throttle, const std::string& address = "0.0.0.0")
      : acceptor_(io_, tcp::endpoint(asio::ip::make_address(address), port)),
        loop_(std::move(scene), throttle, [this](int c, const std::string& t) { deliver(c, t); }) {}

  ~Server() { stop(); }

  unsigned short port() const { return acceptor_.local_endpoint().port(); }

  void start(double max_rate = 0.0) {
    accept();
    io_thread_ = std::thread([this] { io_.run(); });
    loop_thread_ = std::thread([this, max_rate] { loop_.run(stop_, max_rate); });
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    stop_ = true;
    if (loop_thread_.joinable()) loop_thread_.join();
    io_.stop();
    if (io_thread_.joinable()) io_thread_.join();
    beast::error_code ec;
    acceptor_.close(ec);
    for (auto& [id, s] : sessions_) s->close();
    sessions_.clear();
  }

  /// Queues a control message that has no client to answer.
  void submit(std::string text) { loop_.submit(kNoClient, std::move(text)); }

  void wait() {
    if (loop_thread_.joinable()) loop_thread_.join();
  }

 private:
  class Session : public std::enable_shared_from_this<Session> {
   public:
    Session(tcp::socket socket, Server& server, int id) : ws_(std::move(socket)), server_(server), id_(id) {}

    void start() {
      http::async_read(ws_.next_layer(), buffer_, request_,
                       [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_request(ec); });
    }

    void send(std::shared_ptr<const std::string> text) {
      if (!open_) return;
      if (queue_.size() >= kMaxQueuedFrames) queue_.pop_front();
      queue_.push_back(std::move(text));
      if (queue_.size() == 1 && !writing_) write_next();
    }

    void close() {
      open_ = false;
      beast::error_code ec;
      ws_.next_layer().socket().close(ec);
    }

   private:
    void on_request(beast::error_code ec) {
      if (ec) return;
      if (!websocket::is_upgrade(request_) || request_.target() != "/sim") {
        auto res = std::make_shared<http::response<http::string_body>>(http::status::not_found, request_.version());
        res->set(http::field::content_type, "text/plain");
        res->body() = "websocket endpoint is /sim\n";
        res->prepare_payload();
        http::async_write(ws_.next_layer(), *res,
                          [self = shared_from_this(), res](beast::error_code, std::size_t) { self->close(); });
        return;
      }
      ws_.text(true);
      ws_.async_accept(request_, [self = shared_from_this()](beast::error_code e) {
        if (e) return;
        self->open_ = true;
        self->server_.loop_.connect(self->id_);
        self->read();
      });
    }

    void read() {
      ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
        if (ec) {
          self->open_ = false;
          self->server_.sessions_.erase(self->id_);
          return;
        }
        self->server_.loop_.submit(self->id_, beast::buffers_to_string(self->buffer_.data()));
        self->buffer_.consume(self->buffer_.size());
        self->read();
      });
    }

    void write_next() {
      if (queue_.empty() || !open_) return;
      writing_ = true;
      auto text = queue_.front();
      ws_.async_write(asio::buffer(*text), [self = shared_from_this(), text](beast::error_code ec, std::size_t) {
        self->writing_ = false;
        if (ec) {
          self->open_ = false;
          return;
        }
        self->queue_.pop_front();
        self->write_next();
      });
    }

    websocket::stream<beast::tcp_stream> ws_;
    beast::flat_buffer buffer_;
    http::request<http::string_body> request_;
    Server& server_;
    int id_;
    bool open_ = false;
    bool writing_ = false;
    std::deque<std::shared_ptr<const std::string>> queue_;
  };

  void accept() {
    acceptor_.async_accept([this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      const int id = next_id_++;
      auto s = std::make_shared<Session>(std::move(socket), *this, id);
      sessions_[id] = s;
      s->start();
      accept();
    });
  }

  void deliver(int client, const std::string& text) {
    auto shared = std::make_shared<const std::string>(text);
    asio::post(io_, [this, client, shared] {
      if (client == SimLoop::kBroadcast) {
        for (auto& [id, s] : sessions_) s->send(shared);
      } else if (auto it = sessions_.find(client); it != sessions_.end()) {
        it->second->send(shared);
      }
    });
  }

  asio::io_context io_;
  tcp::acceptor acceptor_;
  SimLoop loop_;
  std::map<int, std::shared_ptr<Session>> sessions_;
  int next_id_ = 0;
  std::atomic<bool> stop_{false};
  std::atomic<bool> stopped_{false};
  std::thread io_thread_, loop_thread_;
};

/// Minimal synchronous client, used by tests and scripts.
class Client {
 public:
  Client(const std::string& host, unsigned short port, const std::string& target = "/sim") : ws_(io_) {
    tcp::resolver resolver(io_);
    auto results = resolver.resolve(host, std::to_string(port));
    asio::connect(ws_.next_layer(), results);
    ws_.handshake(host, target);
    ws_.text(true);
  }

  void send(const Json& j) { ws_.write(asio::buffer(j.dump())); }

  Json receive() {
    beast::flat_buffer buf;
    ws_.read(buf);
    return Json::parse(beast::buffers_to_string(buf.data()));
  }

  /// Reads until a message satisfies pred; other messages are returned in skipped.
  Json receive_until(const std::function<bool(const Json&)>& pred, std::vector<Json>* skipped = nullptr) {
    for (;;) {
      Json j = receive();
      if (pred(j)) return j;
      if (skipped) skipped->push_back(std::move(j));
    }
  }

  void close() {
    beast::error_code ec;
    ws_.close(websocket::close_code::normal, ec);
  }

 private:
  asio::io_context io_;
  websocket::stream<tcp::socket> ws_;
};

}  // namespace net

}  // namespace msc
