#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoshap/format.hpp"
#include "protoshap/model.hpp"
#include "protoshap/shapley.hpp"
#include "protoshap/tensor.hpp"

namespace protoshap {

namespace detail {

// Whitespace-separated token reader that tracks line numbers and byte
// offsets so parse errors can point at the failure.
class TokenReader {
 public:
  TokenReader(std::string text, std::string origin)
      : text_(std::move(text)), origin_(std::move(origin)) {}

  std::string next(const char* what) {
    skip_space();
    if (pos_ >= text_.size())
      throw std::runtime_error(origin_ + ": unexpected end of file at byte " +
                               std::to_string(pos_) + " while reading " + what);
    const std::size_t start = pos_;
    while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    return text_.substr(start, pos_ - start);
  }

  void expect(const std::string& token) {
    const std::string got = next(("'" + token + "'").c_str());
    if (got != token)
      throw std::runtime_error(origin_ + ": line " + std::to_string(line_) + ": expected '" +
                               token + "', got '" + got + "'");
  }

  long long integer(const char* what) {
    const std::string tok = next(what);
    try {
      std::size_t used = 0;
      const long long v = std::stoll(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw std::runtime_error(origin_ + ": line " + std::to_string(line_) + ": field '" +
                               std::string(what) + "' is not an integer: '" + tok + "'");
    }
  }

  double number(const char* what) {
    const std::string tok = next(what);
    double v = 0.0;
    try {
      v = parse_double(tok);
    } catch (const std::exception&) {
      throw std::runtime_error(origin_ + ": line " + std::to_string(line_) + ": field '" +
                               std::string(what) + "' is not a number: '" + tok + "'");
    }
    if (!std::isfinite(v))
      throw std::runtime_error(origin_ + ": line " + std::to_string(line_) +
                               ": non-finite value rejected in field '" + std::string(what) + "'");
    return v;
  }

  bool at_end() {
    skip_space();
    return pos_ >= text_.size();
  }

  int line() const { return line_; }
  const std::string& origin() const { return origin_; }

  [[noreturn]] void fail(const std::string& message) const {
    throw std::runtime_error(origin_ + ": line " + std::to_string(line_) + ": " + message);
  }

 private:
  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) {
      if (text_[pos_] == '\n') ++line_;
      ++pos_;
    }
  }

  std::string text_;
  std::string origin_;
  std::size_t pos_ = 0;
  int line_ = 1;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline Activation parse_activation(TokenReader& r) {
  const std::string tok = r.next("activation");
  if (tok == "none") return Activation::none;
  if (tok == "relu") return Activation::relu;
  if (tok == "relu1") return Activation::relu1;
  r.fail("unknown activation '" + tok + "'");
}

inline void write_values(std::ostringstream& os, const std::vector<double>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    os << (i ? " " : "") << format_double(v[i]);
  }
  os << '\n';
}

inline std::vector<double> read_values(TokenReader& r, long long count, const char* what) {
  std::vector<double> v(static_cast<std::size_t>(count));
  for (long long i = 0; i < count; ++i) v[static_cast<std::size_t>(i)] = r.number(what);
  return v;
}

inline void write_layer(std::ostringstream& os, const LayerDesc& l) {
  if (l.kind == LayerKind::conv) {
    os << "conv " << l.weights.extent(0) << ' ' << l.weights.extent(1) << ' '
       << l.weights.extent(2) << ' ' << l.weights.extent(3) << ' ' << l.stride << ' '
       << l.padding << ' ' << to_string(l.activation) << '\n';
  } else {
    os << "affine " << l.weights.extent(0) << ' ' << l.weights.extent(1) << ' '
       << to_string(l.activation) << '\n';
  }
  write_values(os, l.weights.data);
  os << "bias " << (l.bias.empty() ? 0 : 1) << '\n';
  if (!l.bias.empty()) write_values(os, l.bias);
}

inline LayerDesc read_layer(TokenReader& r) {
  LayerDesc l;
  const std::string kind = r.next("layer kind");
  if (kind == "conv") {
    l.kind = LayerKind::conv;
    const int kh = static_cast<int>(r.integer("kernel height"));
    const int kw = static_cast<int>(r.integer("kernel width"));
    const int cin = static_cast<int>(r.integer("in channels"));
    const int cout = static_cast<int>(r.integer("out channels"));
    l.stride = static_cast<int>(r.integer("stride"));
    l.padding = static_cast<int>(r.integer("padding"));
    l.activation = parse_activation(r);
    l.weights = Tensor{{kh, kw, cin, cout},
                       read_values(r, 1LL * kh * kw * cin * cout, "conv weight")};
  } else if (kind == "affine") {
    l.kind = LayerKind::affine;
    const int out = static_cast<int>(r.integer("outputs"));
    const int in = static_cast<int>(r.integer("inputs"));
    l.activation = parse_activation(r);
    l.weights = Tensor{{out, in}, read_values(r, 1LL * out * in, "affine weight")};
  } else {
    r.fail("unknown layer kind '" + kind + "'");
  }
  r.expect("bias");
  if (r.integer("bias flag") != 0) {
    const int n = l.kind == LayerKind::conv ? l.weights.extent(3) : l.weights.extent(0);
    l.bias = read_values(r, n, "bias");
  }
  return l;
}

}  // namespace detail

inline const char* kModelFileMagic = "protoshap-model";
inline const int kModelFileVersion = 1;

inline std::string model_to_string(const ModelSpec& model) {
  validate(model);
  for (const PrototypeProvenance& p : model.prototypes.provenance)
    for (char c : p.image_id)
      if (std::isspace(static_cast<unsigned char>(c)))
        throw std::invalid_argument("save_model: image id '" + p.image_id +
                                    "' contains whitespace");

  std::ostringstream os;
  os << kModelFileMagic << " v" << kModelFileVersion << '\n';
  os << "input " << model.input_shape[0] << ' ' << model.input_shape[1] << ' '
     << model.input_shape[2] << '\n';
  os << "backbone " << model.backbone.size() << '\n';
  for (const LayerDesc& l : model.backbone) detail::write_layer(os, l);
  os << "extractor " << model.extractor.size() << '\n';
  for (const LayerDesc& l : model.extractor) detail::write_layer(os, l);

  const PrototypeSet& p = model.prototypes;
  os << "prototypes " << p.per_class << ' ' << p.classes << ' ' << p.channels << '\n';
  for (const auto& v : p.values) detail::write_values(os, v);
  os << "provenance " << (p.has_provenance() ? 1 : 0) << '\n';
  for (const PrototypeProvenance& pr : p.provenance)
    os << pr.cls << ' ' << pr.index << ' ' << pr.image_id << ' ' << pr.row << ' ' << pr.col
       << '\n';
  os << "classifier\n";
  const int kc = p.count();
  for (int c = 0; c < p.classes; ++c) {
    std::vector<double> row(model.classifier_weights.data.begin() + c * kc,
                            model.classifier_weights.data.begin() + (c + 1) * kc);
    detail::write_values(os, row);
  }
  os << "classifier_bias " << (model.classifier_bias.empty() ? 0 : 1) << '\n';
  if (!model.classifier_bias.empty()) detail::write_values(os, model.classifier_bias);
  os << "end\n";
  return os.str();
}

inline ModelSpec model_from_string(const std::string& text, const std::string& origin) {
  detail::TokenReader r(text, origin);
  r.expect(kModelFileMagic);
  const std::string version = r.next("version");
  if (version != "v" + std::to_string(kModelFileVersion))
    r.fail("unsupported schema version '" + version + "', expected v" +
           std::to_string(kModelFileVersion));

  ModelSpec m;
  r.expect("input");
  m.input_shape = {static_cast<int>(r.integer("input height")),
                   static_cast<int>(r.integer("input width")),
                   static_cast<int>(r.integer("input channels"))};
  r.expect("backbone");
  const long long nb = r.integer("backbone layer count");
  for (long long i = 0; i < nb; ++i) m.backbone.push_back(detail::read_layer(r));
  r.expect("extractor");
  const long long ne = r.integer("extractor layer count");
  for (long long i = 0; i < ne; ++i) m.extractor.push_back(detail::read_layer(r));

  r.expect("prototypes");
  PrototypeSet& p = m.prototypes;
  p.per_class = static_cast<int>(r.integer("prototypes per class"));
  p.classes = static_cast<int>(r.integer("class count"));
  p.channels = static_cast<int>(r.integer("prototype channels"));
  for (int i = 0; i < p.count(); ++i)
    p.values.push_back(detail::read_values(r, p.channels, "prototype value"));
  r.expect("provenance");
  if (r.integer("provenance flag") != 0) {
    for (int i = 0; i < p.count(); ++i) {
      PrototypeProvenance pr;
      pr.cls = static_cast<int>(r.integer("provenance class"));
      pr.index = static_cast<int>(r.integer("provenance index"));
      pr.image_id = r.next("provenance image id");
      pr.row = static_cast<int>(r.integer("provenance row"));
      pr.col = static_cast<int>(r.integer("provenance col"));
      p.provenance.push_back(pr);
    }
  }

  r.expect("classifier");
  std::vector<double> w;
  for (int c = 0; c < p.classes; ++c) {
    const std::vector<double> row = detail::read_values(r, p.count(), "classifier weight");
    w.insert(w.end(), row.begin(), row.end());
  }
  if (p.classes < 1 || p.count() < 1) r.fail("classifier requires K, C >= 1");
  m.classifier_weights = Tensor{{p.classes, p.count()}, std::move(w)};
  r.expect("classifier_bias");
  if (r.integer("classifier bias flag") != 0)
    m.classifier_bias = detail::read_values(r, p.classes, "classifier bias");
  r.expect("end");

  try {
    validate(m);
  } catch (const std::exception& e) {
    r.fail(e.what());
  }
  return m;
}

inline void save_model(const ModelSpec& model, const std::string& path) {
  detail::write_file(path, model_to_string(model));
}

inline ModelSpec load_model(const std::string& path) {
  return model_from_string(detail::read_file(path), path);
}

// --- tensor text files ------------------------------------------------------
// Header line: "tensor <order> <extents...>", then row-major values.

inline std::string tensor_to_string(const Tensor& t) {
  std::ostringstream os;
  os << "tensor " << t.order();
  for (int e : t.shape) os << ' ' << e;
  os << '\n';
  detail::write_values(os, t.data);
  return os.str();
}

inline Tensor tensor_from_string(const std::string& text, const std::string& origin) {
  detail::TokenReader r(text, origin);
  r.expect("tensor");
  const long long order = r.integer("tensor order");
  if (order < 1 || order > 4) r.fail("tensor order must be 1..4");
  std::vector<int> shape;
  long long count = 1;
  for (long long i = 0; i < order; ++i) {
    const long long e = r.integer("extent");
    if (e < 1) r.fail("extents must be positive");
    shape.push_back(static_cast<int>(e));
    count *= e;
  }
  Tensor out{shape, detail::read_values(r, count, "tensor value")};
  if (!r.at_end()) r.fail("trailing data after tensor values");
  return out;
}

inline void save_tensor(const Tensor& t, const std::string& path) {
  detail::write_file(path, tensor_to_string(t));
}

inline Tensor load_tensor(const std::string& path) {
  return tensor_from_string(detail::read_file(path), path);
}

// --- PGM (P5) ----------------------------------------------------------------

namespace detail {

inline void pgm_skip(const std::string& s, std::size_t& i) {
  for (;;) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i < s.size() && s[i] == '#') {
      while (i < s.size() && s[i] != '\n') ++i;
      continue;
    }
    return;
  }
}

inline long long pgm_int(const std::string& s, std::size_t& i, const std::string& origin) {
  pgm_skip(s, i);
  const std::size_t start = i;
  while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
  if (i == start)
    throw std::runtime_error(origin + ": malformed PGM header at byte " + std::to_string(start));
  return std::stoll(s.substr(start, i - start));
}

}  // namespace detail

// Grayscale image as an H x W x 1 tensor with values scaled to [0, 1].
inline Tensor load_pgm(const std::string& path) {
  const std::string s = detail::read_file(path);
  std::size_t i = 0;
  if (s.size() < 2 || s[0] != 'P' || s[1] != '5')
    throw std::runtime_error(path + ": not a P5 PGM file");
  i = 2;
  const long long w = detail::pgm_int(s, i, path);
  const long long h = detail::pgm_int(s, i, path);
  const long long maxval = detail::pgm_int(s, i, path);
  if (maxval != 255 && maxval != 65535)
    throw std::runtime_error(path + ": unsupported maxval " + std::to_string(maxval));
  ++i;  // single whitespace after maxval
  const int bytes = maxval == 255 ? 1 : 2;
  if (s.size() - i < static_cast<std::size_t>(w * h * bytes))
    throw std::runtime_error(path + ": truncated pixel data at byte " + std::to_string(s.size()));
  Tensor t = Tensor::zeros({static_cast<int>(h), static_cast<int>(w), 1});
  for (long long n = 0; n < w * h; ++n) {
    long long v = static_cast<unsigned char>(s[i + n * bytes]);
    if (bytes == 2) v = v * 256 + static_cast<unsigned char>(s[i + n * bytes + 1]);
    t.data[static_cast<std::size_t>(n)] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return t;
}

// Writes an attribution as an 8-bit PGM, linearly scaled between its minimum
// and maximum; the scale is recorded in a header comment so values can be
// recovered. A constant map renders as mid-gray. Deterministic bytes.
inline void render_heatmap(const AttributionMap& map, const std::string& path) {
  const int h = map.rows, w = map.cols;
  if (h < 1 || w < 1) throw std::invalid_argument("render_heatmap: empty map");
  // Per-pixel intensity; channel attributions collapse by summation.
  std::vector<double> pix(static_cast<std::size_t>(h * w), 0.0);
  for (int n = 0; n < h * w; ++n)
    for (int c = 0; c < map.channels; ++c)
      pix[static_cast<std::size_t>(n)] += map.values[static_cast<std::size_t>(n * map.channels + c)];
  double lo = pix[0], hi = pix[0];
  for (double v : pix) {
    if (!std::isfinite(v)) throw std::invalid_argument("render_heatmap: non-finite attribution");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string bytes;
  bytes += "P5\n# min=" + format_double(lo) + " max=" + format_double(hi) + "\n" +
           std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double v : pix) {
    const int g = hi > lo ? static_cast<int>(std::lround((v - lo) / (hi - lo) * 255.0)) : 128;
    bytes += static_cast<char>(g);
  }
  detail::write_file(path, bytes);
}

// Loads an image for the model input: .pgm files as grayscale, anything else
// as a tensor text file.
inline Tensor load_image(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".pgm") return load_pgm(path);
  return load_tensor(path);
}

inline void attribution_to_csv(std::ostream& os, const AttributionMap& map) {
  os << "# method=" << map.method << " target=" << map.target
     << " residual=" << format_double(map.completeness_residual)
     << " f_full=" << format_double(map.f_full) << " f_empty=" << format_double(map.f_empty)
     << "\n";
  if (map.channels == 1) {
    os << "row,col,value\n";
    for (int r = 0; r < map.rows; ++r)
      for (int c = 0; c < map.cols; ++c)
        os << r << ',' << c << ','
           << format_double(map.values[static_cast<std::size_t>(r * map.cols + c)]) << '\n';
  } else {
    os << "row,col,channel,value\n";
    for (int r = 0; r < map.rows; ++r)
      for (int c = 0; c < map.cols; ++c)
        for (int ch = 0; ch < map.channels; ++ch)
          os << r << ',' << c << ',' << ch << ','
             << format_double(
                    map.values[static_cast<std::size_t>((r * map.cols + c) * map.channels + ch)])
             << '\n';
  }
}

}  // namespace protoshap
