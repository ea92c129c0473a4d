#include "cmsk/model.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace cmsk {

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig m;
  m.variant = name;
  if (name == "mini") {
    m.backbone.embed_dim = 24;
    m.backbone.num_heads = {2, 4, 8, 16};
  } else if (name == "micro") {
    m.backbone.embed_dim = 24;
    m.backbone.num_heads = {4, 8, 16, 32};
  } else if (name == "tiny") {
    m.backbone.embed_dim = 56;
    m.backbone.num_heads = {4, 8, 16, 32};
  } else if (name == "toy") {
    m.backbone.embed_dim = 8;
    m.backbone.num_heads = {2, 4, 8, 16};
    m.backbone.depths = {1, 1, 1, 1};
    m.backbone.window = 4;
    m.backbone.img_h = m.backbone.img_w = 64;
    m.backbone.kan_expansion = 2.0;
  } else {
    check(false, "unknown model preset: " + name);
  }
  return m;
}

int64_t ModelConfig::feature_dim() const {
  int64_t c = backbone.embed_dim;
  return use_cmsa ? 10 * c : 8 * c;
}

void ModelConfig::validate() const {
  backbone.validate();
  cmsa.validate();
  check(num_classes >= 2, "model config: need at least two classes");
  check(head_hidden >= 1, "model config: head hidden width must be positive");
}

Model::Model(const ModelConfig& c, Rng& rng)
    : cfg(c),
      backbone((c.validate(), c.backbone), rng),
      head1(KanLayer::init(c.feature_dim(), c.head_hidden,
                           c.backbone.kan.make(), rng)),
      head2(KanLayer::init(c.head_hidden, c.num_classes,
                           c.backbone.kan.make(), rng)) {
  if (cfg.use_cmsa) cmsa.emplace(cfg.backbone, cfg.cmsa, rng);
}

Tensor Model::features(const Tensor& image, bool training) {
  StageFeatures sf = backbone.forward(image);
  Tensor v = global_avg_pool(sf.f4);
  if (!cfg.use_cmsa) return v;
  Tensor u = global_avg_pool(cmsa->forward(sf, training));
  // The K x K additive fold inflates the fused features by roughly K^2
  // relative to the normalized stage-4 features; rescale so both halves of
  // the concatenation reach the spline head on comparable scales.
  double fold = double(cfg.cmsa.K) * double(cfg.cmsa.K);
  u = mul(u, Tensor::full({1}, 1.0 / fold));
  return concat({u, v}, 0);
}

Tensor Model::forward(const Tensor& image, bool training) {
  Tensor feat = reshape(features(image, training), {1, cfg.feature_dim()});
  Tensor h = head1.forward(feat);
  return reshape(head2.forward(h), {cfg.num_classes});
}

void Model::named_params(NamedParams& out) const {
  backbone.named_params("backbone", out);
  if (cmsa) cmsa->named_params("cmsa", out);
  head1.named_params("head1", out);
  head2.named_params("head2", out);
}

std::vector<std::pair<std::string, std::vector<double>*>>
Model::named_buffers() {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  if (cmsa) {
    out.push_back({"cmsa.cbr1.bn.running_mean", &cmsa->cbr1.bn.running_mean});
    out.push_back({"cmsa.cbr1.bn.running_var", &cmsa->cbr1.bn.running_var});
    out.push_back({"cmsa.cbr2.bn.running_mean", &cmsa->cbr2.bn.running_mean});
    out.push_back({"cmsa.cbr2.bn.running_var", &cmsa->cbr2.bn.running_var});
  }
  return out;
}

int64_t Model::param_count() const {
  NamedParams np;
  named_params(np);
  int64_t n = 0;
  for (auto& [name, t] : np) n += t.numel();
  return n;
}

// ---- checkpoint serialization ----

namespace {

constexpr uint32_t kCheckpointVersion = 1;
constexpr uint8_t kDtypeF32 = 0, kDtypeF64 = 1;

void write_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  check(bool(is), "truncated checkpoint file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  check(bool(is), "truncated checkpoint file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

void write_bytes(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), std::streamsize(s.size()));
}

std::string read_bytes(std::istream& is) {
  uint64_t n = read_u64(is);
  check(n <= (uint64_t(1) << 32), "corrupt checkpoint: implausible length");
  std::string s(n, '\0');
  is.read(s.data(), std::streamsize(n));
  check(bool(is), "truncated checkpoint file");
  return s;
}

std::string encode_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "variant=" << c.variant << "\n";
  os << "num_classes=" << c.num_classes << "\n";
  os << "head_hidden=" << c.head_hidden << "\n";
  os << "use_cmsa=" << (c.use_cmsa ? 1 : 0) << "\n";
  os << "embed_dim=" << c.backbone.embed_dim << "\n";
  os << "depths=" << c.backbone.depths[0] << "," << c.backbone.depths[1] << ","
     << c.backbone.depths[2] << "," << c.backbone.depths[3] << "\n";
  os << "num_heads=" << c.backbone.num_heads[0] << ","
     << c.backbone.num_heads[1] << "," << c.backbone.num_heads[2] << ","
     << c.backbone.num_heads[3] << "\n";
  os << "window=" << c.backbone.window << "\n";
  os << "img_h=" << c.backbone.img_h << "\n";
  os << "img_w=" << c.backbone.img_w << "\n";
  os << "kan_expansion=" << c.backbone.kan_expansion << "\n";
  os << "rel_pos_bias=" << (c.backbone.rel_pos_bias ? 1 : 0) << "\n";
  os << "kan_order=" << c.backbone.kan.order << "\n";
  os << "kan_intervals=" << c.backbone.kan.intervals << "\n";
  os << "kan_lo=" << c.backbone.kan.lo << "\n";
  os << "kan_hi=" << c.backbone.kan.hi << "\n";
  os << "cmsa_k=" << c.cmsa.K << "\n";
  os << "cmsa_s=" << c.cmsa.s << "\n";
  return os.str();
}

ModelConfig decode_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    check(it != kv.end(), "corrupt checkpoint: config lacks key " + k);
    return it->second;
  };
  auto get4 = [&](const std::string& k, auto& arr) {
    std::istringstream ss(get(k));
    std::string part;
    for (int i = 0; i < 4; ++i) {
      check(bool(std::getline(ss, part, ',')),
            "corrupt checkpoint: config key " + k);
      arr[i] = std::stoi(part);
    }
  };
  ModelConfig c;
  c.variant = get("variant");
  c.num_classes = std::stoll(get("num_classes"));
  c.head_hidden = std::stoll(get("head_hidden"));
  c.use_cmsa = get("use_cmsa") == "1";
  c.backbone.embed_dim = std::stoll(get("embed_dim"));
  get4("depths", c.backbone.depths);
  get4("num_heads", c.backbone.num_heads);
  c.backbone.window = std::stoi(get("window"));
  c.backbone.img_h = std::stoll(get("img_h"));
  c.backbone.img_w = std::stoll(get("img_w"));
  c.backbone.kan_expansion = std::stod(get("kan_expansion"));
  c.backbone.rel_pos_bias = get("rel_pos_bias") == "1";
  c.backbone.kan.order = std::stoi(get("kan_order"));
  c.backbone.kan.intervals = std::stoi(get("kan_intervals"));
  c.backbone.kan.lo = std::stod(get("kan_lo"));
  c.backbone.kan.hi = std::stod(get("kan_hi"));
  c.cmsa.K = std::stoi(get("cmsa_k"));
  c.cmsa.s = std::stoi(get("cmsa_s"));
  return c;
}

void write_entry(std::ostream& os, const std::string& name, uint8_t dtype,
                 const Shape& shape, const std::vector<double>& data) {
  write_bytes(os, name);
  os.put(char(dtype));
  write_u32(os, uint32_t(shape.size()));
  for (int64_t d : shape) write_u64(os, uint64_t(d));
  if (dtype == kDtypeF32) {
    for (double v : data) {
      float f = float(v);
      uint32_t bits;
      static_assert(sizeof(bits) == sizeof(f));
      std::memcpy(&bits, &f, 4);
      write_u32(os, bits);
    }
  } else {
    for (double v : data) {
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      write_u64(os, bits);
    }
  }
}

}  // namespace

void save_checkpoint(Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "cannot open checkpoint path for writing: " + path);
  os.write("CMSK", 4);
  write_u32(os, kCheckpointVersion);
  write_bytes(os, encode_config(model.cfg));

  NamedParams np;
  model.named_params(np);
  auto buffers = model.named_buffers();
  write_u64(os, np.size() + buffers.size());
  // f64 payloads: f32 truncation can perturb eval logits by more than the
  // 1e-6 round-trip contract on deeper configs
  for (auto& [name, t] : np)
    write_entry(os, name, kDtypeF64, t.shape(), t.data());
  for (auto& [name, vec] : buffers)
    write_entry(os, name, kDtypeF64, {int64_t(vec->size())}, *vec);
  check(bool(os), "failed writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "cannot open checkpoint file: " + path);
  char magic[4] = {};
  is.read(magic, 4);
  check(bool(is) && std::string(magic, 4) == "CMSK",
        "not a checkpoint file: " + path);
  uint32_t version = read_u32(is);
  check(version == kCheckpointVersion,
        "unsupported checkpoint version " + std::to_string(version) +
            " (expected " + std::to_string(kCheckpointVersion) + ")");
  ModelConfig cfg = decode_config(read_bytes(is));
  Rng rng(0);
  Model model(cfg, rng);

  std::map<std::string, Tensor> params;
  NamedParams np;
  model.named_params(np);
  for (auto& [name, t] : np) params.emplace(name, t);
  std::map<std::string, std::vector<double>*> bufs;
  for (auto& [name, vec] : model.named_buffers()) bufs.emplace(name, vec);

  uint64_t entries = read_u64(is);
  for (uint64_t e = 0; e < entries; ++e) {
    std::string name = read_bytes(is);
    int dtype = is.get();
    check(dtype != EOF, "truncated checkpoint file");
    uint32_t rank = read_u32(is);
    check(rank <= 8, "corrupt checkpoint: implausible rank");
    int64_t numel = 1;
    Shape shape;
    for (uint32_t i = 0; i < rank; ++i) {
      shape.push_back(int64_t(read_u64(is)));
      numel *= shape.back();
    }
    std::vector<double> data(numel);
    for (int64_t i = 0; i < numel; ++i) {
      if (dtype == kDtypeF32) {
        uint32_t bits = read_u32(is);
        float f;
        std::memcpy(&f, &bits, 4);
        data[i] = f;
      } else {
        uint64_t bits = read_u64(is);
        std::memcpy(&data[i], &bits, 8);
      }
    }
    if (auto it = params.find(name); it != params.end()) {
      check(it->second.shape() == shape,
            "corrupt checkpoint: shape mismatch for " + name);
      it->second.mutable_data() = data;
    } else if (auto bit = bufs.find(name); bit != bufs.end()) {
      check(bit->second->size() == data.size(),
            "corrupt checkpoint: size mismatch for " + name);
      *bit->second = data;
    } else {
      check(false, "corrupt checkpoint: unknown entry " + name);
    }
  }
  return model;
}

}  // namespace cmsk
