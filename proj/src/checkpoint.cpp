#include "rise/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rise {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void put(T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put(const MatrixXd& m) {
    out_.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size());
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  void get(MatrixXd& m, Eigen::Index rows, Eigen::Index cols) {
    m.resize(rows, cols);
    const std::size_t bytes = sizeof(double) * m.size();
    need(bytes);
    std::memcpy(m.data(), in_.data() + pos_, bytes);
    pos_ += bytes;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw InputError("checkpoint truncated");
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Model& model) {
  check_model(model);
  Writer w;
  for (char c : kCheckpointMagic) w.put(c);
  w.put(kVersion);
  w.put(std::uint32_t{sizeof(double)});
  const auto& c = model.config;
  for (int v : {c.vocab_size, c.d_model, c.d_expert_hidden, c.n_layers, c.n_experts, c.top_k,
                c.max_seq_len})
    w.put(std::int64_t{v});
  w.put(c.seed);
  w.put(model.embedding);
  for (const auto& layer : model.layers) {
    w.put(layer.router);
    w.put(MatrixXd(layer.router_prior));
    w.put(layer.shared);
    for (const auto& e : layer.experts) {
      w.put(e.w_in);
      w.put(e.w_out);
    }
    for (auto flag : layer.routable) w.put(flag);
  }
  w.put(model.head);
  return w.take();
}

Model decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  char magic[8];
  for (char& ch : magic) ch = r.get<char>();
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw InputError("not a checkpoint: bad magic header");
  if (r.get<std::uint32_t>() != kVersion) throw InputError("unsupported checkpoint version");
  if (r.get<std::uint32_t>() != sizeof(double))
    throw InputError("unsupported checkpoint scalar width");

  auto narrow = [](std::int64_t v) {
    if (v < 0 || v > (1 << 24)) throw InputError("checkpoint dimension out of range");
    return static_cast<int>(v);
  };
  Model model;
  auto& c = model.config;
  c.vocab_size = narrow(r.get<std::int64_t>());
  c.d_model = narrow(r.get<std::int64_t>());
  c.d_expert_hidden = narrow(r.get<std::int64_t>());
  c.n_layers = narrow(r.get<std::int64_t>());
  c.n_experts = narrow(r.get<std::int64_t>());
  c.top_k = narrow(r.get<std::int64_t>());
  c.max_seq_len = narrow(r.get<std::int64_t>());
  c.seed = r.get<std::uint64_t>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw InputError(std::string("checkpoint: ") + e.what());
  }

  r.get(model.embedding, c.vocab_size, c.d_model);
  model.layers.resize(c.n_layers);
  for (auto& layer : model.layers) {
    r.get(layer.router, c.d_model, c.n_experts);
    MatrixXd prior;
    r.get(prior, 1, c.n_experts);
    layer.router_prior = prior.row(0);
    r.get(layer.shared, c.d_model, c.d_model);
    layer.experts.resize(c.n_experts);
    for (auto& e : layer.experts) {
      r.get(e.w_in, c.d_model, c.d_expert_hidden);
      r.get(e.w_out, c.d_expert_hidden, c.d_model);
    }
    layer.routable.resize(c.n_experts);
    for (auto& flag : layer.routable) {
      flag = r.get<std::uint8_t>();
      if (flag > 1) throw InputError("checkpoint: bad routable flag");
    }
  }
  r.get(model.head, c.d_model, c.vocab_size);
  if (!r.done()) throw InputError("checkpoint has trailing bytes");
  check_model(model);
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

bool bitwise_equal(const Model& a, const Model& b) {
  // Encoding is canonical, so byte equality is parameter bit equality.
  return encode_checkpoint(a) == encode_checkpoint(b);
}

}  // namespace rise
