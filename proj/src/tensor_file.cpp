#include "iceformer/tensor_file.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace iceformer {

namespace {

constexpr std::array<char, 4> kMagic = {'I', 'C', 'E', 'A'};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  template <typename V>
  V read(const char* what, const std::string& tensor = {}) {
    need(sizeof(V), what, tensor);
    V value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return value;
  }

  std::span<const std::byte> take(std::size_t n, const char* what, const std::string& tensor = {}) {
    need(n, what, tensor);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  void need(std::size_t n, const char* what, const std::string& tensor) const {
    if (bytes_.size() - pos_ < n) {
      std::string msg = std::string("truncated ") + what;
      if (!tensor.empty()) msg += " of tensor '" + tensor + "'";
      throw ParseError(msg, pos_, tensor);
    }
  }

  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

template <typename V>
void append(std::vector<std::byte>& out, V value) {
  const auto* p = reinterpret_cast<const std::byte*>(&value);
  out.insert(out.end(), p, p + sizeof(V));
}

DType tensor_dtype(const TensorFile& file, const std::string& name) {
  return name == "mask" ? DType::UInt8 : file.dtype;
}

template <typename T>
Tensor matrix_tensor(const std::string& name, const Matrix<T>& m) {
  Tensor t{name, {m.rows(), m.cols()}, {}};
  const auto* p = reinterpret_cast<const std::byte*>(m.data().data());
  t.payload.assign(p, p + m.size() * sizeof(T));
  return t;
}

template <typename T>
Matrix<T> tensor_matrix(const TensorFile& file, const Tensor& t) {
  if (t.dims.size() != 2) {
    throw ValidationError("tensor '" + t.name + "' must have rank 2, found rank " + std::to_string(t.dims.size()));
  }
  const auto rows = static_cast<std::size_t>(t.dims[0]);
  const auto cols = static_cast<std::size_t>(t.dims[1]);
  std::vector<T> data(rows * cols);
  if (file.dtype == DType::Float32) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      float f;
      std::memcpy(&f, t.payload.data() + i * sizeof(float), sizeof(float));
      data[i] = static_cast<T>(f);
    }
  } else {
    for (std::size_t i = 0; i < data.size(); ++i) {
      double f;
      std::memcpy(&f, t.payload.data() + i * sizeof(double), sizeof(double));
      data[i] = static_cast<T>(f);
    }
  }
  try {
    return Matrix<T>::from_data(rows, cols, std::move(data));
  } catch (const ValidationError& e) {
    throw ValidationError("tensor '" + t.name + "': " + e.what());
  }
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::Float32: return 4;
    case DType::Float64: return 8;
    case DType::UInt8: return 1;
  }
  return 0;
}

ParseError::ParseError(const std::string& what, std::size_t offset, std::string tensor)
    : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset), tensor_(std::move(tensor)) {}

const Tensor* TensorFile::find(std::string_view name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(), [&](const Tensor& t) { return t.name == name; });
  return it == tensors.end() ? nullptr : &*it;
}

TensorFile parse_tensor_file(std::span<const std::byte> bytes) {
  Reader in(bytes);
  auto magic = in.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin(),
                  [](std::byte b, char c) { return static_cast<char>(b) == c; })) {
    throw ParseError("bad magic, expected ICEA", 0);
  }
  const auto version_at = in.offset();
  const auto version = in.read<std::uint32_t>("version");
  if (version != kTensorFileVersion) {
    throw ParseError("unsupported version " + std::to_string(version), version_at);
  }
  const auto dtype_at = in.offset();
  const auto dtype_code = in.read<std::uint32_t>("dtype");
  if (dtype_code != 0 && dtype_code != 1) {
    throw ParseError("unsupported header dtype " + std::to_string(dtype_code), dtype_at);
  }
  TensorFile file;
  file.dtype = static_cast<DType>(dtype_code);
  const auto count = in.read<std::uint32_t>("tensor count");

  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = in.read<std::uint32_t>("tensor name length");
    auto name_bytes = in.take(name_len, "tensor name");
    Tensor tensor;
    tensor.name.assign(reinterpret_cast<const char*>(name_bytes.data()), name_bytes.size());
    const auto rank = in.read<std::uint32_t>("rank", tensor.name);
    std::uint64_t elements = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto dim_at = in.offset();
      const auto dim = in.read<std::uint64_t>("dims", tensor.name);
      if (dim != 0 && elements > std::numeric_limits<std::uint64_t>::max() / dim) {
        throw ParseError("dimension product overflows", dim_at, tensor.name);
      }
      elements *= dim;
      tensor.dims.push_back(dim);
    }
    const auto elem_size = dtype_size(tensor_dtype(file, tensor.name));
    const auto payload_at = in.offset();
    if (elements > (bytes.size() - payload_at) / elem_size) {
      throw ParseError("truncated payload of tensor '" + tensor.name + "'", payload_at, tensor.name);
    }
    auto payload = in.take(static_cast<std::size_t>(elements) * elem_size, "payload", tensor.name);
    tensor.payload.assign(payload.begin(), payload.end());
    file.tensors.push_back(std::move(tensor));
  }
  if (in.offset() != bytes.size()) throw ParseError("trailing bytes after last tensor", in.offset());
  return file;
}

std::vector<std::byte> serialize_tensor_file(const TensorFile& file) {
  std::vector<std::byte> out;
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  append<std::uint32_t>(out, kTensorFileVersion);
  append<std::uint32_t>(out, static_cast<std::uint32_t>(file.dtype));
  append<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    std::uint64_t elements = 1;
    for (auto d : t.dims) elements *= d;
    if (t.payload.size() != elements * dtype_size(tensor_dtype(file, t.name))) {
      throw ValidationError("payload of tensor '" + t.name + "' does not match its dims");
    }
    append<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    for (char c : t.name) out.push_back(static_cast<std::byte>(c));
    append<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) append<std::uint64_t>(out, d);
    out.insert(out.end(), t.payload.begin(), t.payload.end());
  }
  return out;
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
  return parse_tensor_file(std::as_bytes(std::span<const char>(raw)));
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  const auto bytes = serialize_tensor_file(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

template <typename T>
TensorFile problem_to_file(const AttentionProblem<T>& problem) {
  TensorFile file;
  file.dtype = dtype_of<T>();
  file.tensors.push_back(matrix_tensor("Q", problem.queries));
  file.tensors.push_back(matrix_tensor("K", problem.keys));
  file.tensors.push_back(matrix_tensor("V", problem.values));
  switch (problem.mask.kind()) {
    case MaskKind::None: break;
    case MaskKind::Causal: file.tensors.push_back(Tensor{"mask", {}, {std::byte{1}}}); break;
    case MaskKind::Explicit: {
      Tensor t{"mask", {problem.mask.rows(), problem.mask.cols()}, {}};
      for (auto b : problem.mask.bits()) t.payload.push_back(static_cast<std::byte>(b));
      file.tensors.push_back(std::move(t));
      break;
    }
  }
  return file;
}

template <typename T>
AttentionProblem<T> problem_from_file(const TensorFile& file) {
  for (const auto& t : file.tensors) {
    if (t.name != "Q" && t.name != "K" && t.name != "V" && t.name != "mask") {
      throw ValidationError("unexpected tensor '" + t.name + "' in attention problem");
    }
  }
  auto require = [&](const char* name) -> const Tensor& {
    const Tensor* t = file.find(name);
    if (!t) throw ValidationError(std::string("attention problem is missing tensor '") + name + "'");
    return *t;
  };
  AttentionProblem<T> problem;
  problem.queries = tensor_matrix<T>(file, require("Q"));
  problem.keys = tensor_matrix<T>(file, require("K"));
  problem.values = tensor_matrix<T>(file, require("V"));
  if (const Tensor* mask = file.find("mask")) {
    if (mask->dims.empty()) {
      const auto flag = std::to_integer<std::uint8_t>(mask->payload.at(0));
      if (flag > 1) throw ValidationError("unknown mask flag " + std::to_string(flag));
      problem.mask = flag == 1 ? Mask::causal() : Mask::none();
    } else if (mask->dims.size() == 2) {
      std::vector<std::uint8_t> bits(mask->payload.size());
      std::transform(mask->payload.begin(), mask->payload.end(), bits.begin(),
                     [](std::byte b) { return std::to_integer<std::uint8_t>(b); });
      problem.mask = Mask::explicit_bits(mask->dims[0], mask->dims[1], std::move(bits));
    } else {
      throw ValidationError("mask tensor must have rank 0 or 2");
    }
  }
  problem.validate();
  return problem;
}

template <typename T>
void save_problem(const std::filesystem::path& path, const AttentionProblem<T>& problem) {
  write_tensor_file(path, problem_to_file(problem));
}

template <typename T>
AttentionProblem<T> load_problem(const std::filesystem::path& path) {
  return problem_from_file<T>(read_tensor_file(path));
}

template <typename T>
TensorFile matrix_to_file(const std::string& name, const Matrix<T>& matrix) {
  TensorFile file;
  file.dtype = dtype_of<T>();
  file.tensors.push_back(matrix_tensor(name, matrix));
  return file;
}

template <typename T>
Matrix<T> matrix_from_file(const TensorFile& file, const std::string& name) {
  const Tensor* t = file.find(name);
  if (!t) throw ValidationError("missing tensor '" + name + "'");
  return tensor_matrix<T>(file, *t);
}

template TensorFile problem_to_file(const AttentionProblem<float>&);
template TensorFile problem_to_file(const AttentionProblem<double>&);
template AttentionProblem<float> problem_from_file(const TensorFile&);
template AttentionProblem<double> problem_from_file(const TensorFile&);
template void save_problem(const std::filesystem::path&, const AttentionProblem<float>&);
template void save_problem(const std::filesystem::path&, const AttentionProblem<double>&);
template AttentionProblem<float> load_problem(const std::filesystem::path&);
template AttentionProblem<double> load_problem(const std::filesystem::path&);
template TensorFile matrix_to_file(const std::string&, const Matrix<float>&);
template TensorFile matrix_to_file(const std::string&, const Matrix<double>&);
template Matrix<float> matrix_from_file(const TensorFile&, const std::string&);
template Matrix<double> matrix_from_file(const TensorFile&, const std::string&);

}  // namespace iceformer
