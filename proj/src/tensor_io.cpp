#include "dsfwsi/tensor_io.hpp"

#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

namespace dsfwsi {

namespace {

std::string descr_for(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat: return "<f4";
        case torch::kDouble: return "<f8";
        case torch::kLong: return "<i8";
        default: throw FormatError(std::string("npy: unsupported dtype ") + c10::toString(t));
    }
}

torch::ScalarType dtype_for(const std::string& descr) {
    if (descr == "<f4") return torch::kFloat;
    if (descr == "<f8") return torch::kDouble;
    if (descr == "<i8") return torch::kLong;
    throw FormatError("npy: unsupported descr '" + descr + "'");
}

void for_each_array(const torch::nn::Module& module,
                    const std::function<void(const std::string&, const torch::Tensor&)>& fn) {
    for (const auto& p : module.named_parameters(true)) fn(p.key(), p.value());
    for (const auto& b : module.named_buffers(true)) fn(b.key(), b.value());
}

}  // namespace

void write_npy(const torch::Tensor& tensor, const fs::path& path) {
    auto t = tensor.detach().contiguous().cpu();
    std::ostringstream header;
    header << "{'descr': '" << descr_for(t.scalar_type()) << "', 'fortran_order': False, 'shape': (";
    for (std::int64_t i = 0; i < t.dim(); ++i) {
        header << t.size(i);
        if (t.dim() == 1 || i + 1 < t.dim()) header << ",";
        if (i + 1 < t.dim()) header << " ";
    }
    header << "), }";
    std::string h = header.str();
    const std::size_t prefix = 10;
    std::size_t total = prefix + h.size() + 1;
    h.append((64 - total % 64) % 64, ' ');
    h.push_back('\n');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write array '" + path.string() + "'");
    const char magic[] = "\x93NUMPY\x01\x00";
    out.write(magic, 8);
    const auto len = static_cast<std::uint16_t>(h.size());
    const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
    out.write(len_bytes, 2);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    if (!out) throw IoError("failed writing array '" + path.string() + "'");
}

torch::Tensor read_npy(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open array '" + path.string() + "'");
    char magic[10];
    in.read(magic, 10);
    if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0 || magic[6] != 1)
        throw FormatError("npy: bad magic or unsupported version in '" + path.string() + "'");
    const auto len = static_cast<std::uint16_t>(static_cast<unsigned char>(magic[8]) |
                                                (static_cast<unsigned char>(magic[9]) << 8));
    std::string h(len, '\0');
    in.read(h.data(), len);
    if (!in) throw FormatError("npy: truncated header in '" + path.string() + "'");

    static const std::regex descr_re("'descr':\\s*'([^']+)'");
    static const std::regex order_re("'fortran_order':\\s*(True|False)");
    static const std::regex shape_re("'shape':\\s*\\(([^)]*)\\)");
    std::smatch m;
    if (!std::regex_search(h, m, descr_re)) throw FormatError("npy: missing descr in '" + path.string() + "'");
    const auto dtype = dtype_for(m[1]);
    if (!std::regex_search(h, m, order_re) || m[1] == "True")
        throw FormatError("npy: fortran order unsupported in '" + path.string() + "'");
    if (!std::regex_search(h, m, shape_re)) throw FormatError("npy: missing shape in '" + path.string() + "'");
    std::vector<std::int64_t> shape;
    std::stringstream ss(m[1].str());
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(' '));
        if (!item.empty()) shape.push_back(std::stoll(item));
    }
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    if (!in) throw FormatError("npy: truncated data in '" + path.string() + "'");
    return t;
}

void save_module_arrays(const torch::nn::Module& module, const fs::path& dir) {
    fs::create_directories(dir);
    for_each_array(module, [&](const std::string& name, const torch::Tensor& t) {
        write_npy(t, dir / (name + ".npy"));
    });
}

void load_module_arrays(torch::nn::Module& module, const fs::path& dir) {
    torch::NoGradGuard no_grad;
    auto load_into = [&](const std::string& name, torch::Tensor target) {
        const fs::path file = dir / (name + ".npy");
        if (!fs::exists(file))
            throw IntegrityError("checkpoint '" + dir.string() + "' is missing array for parameter '" + name + "'");
        auto src = read_npy(file);
        if (src.sizes() != target.sizes())
            throw ShapeMismatchError("parameter '" + name + "': checkpoint shape " + c10::str(src.sizes()) +
                                     " does not match model shape " + c10::str(target.sizes()));
        if (src.scalar_type() != target.scalar_type())
            throw ShapeMismatchError("parameter '" + name + "': checkpoint dtype differs from model dtype");
        target.copy_(src);
    };
    for (auto& p : module.named_parameters(true)) load_into(p.key(), p.value());
    for (auto& b : module.named_buffers(true)) load_into(b.key(), b.value());
}

std::uint64_t module_checksum(const torch::nn::Module& module) {
    std::uint64_t h = 1469598103934665603ULL;
    for_each_array(module, [&](const std::string& name, const torch::Tensor& t) {
        for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
        auto c = t.detach().contiguous().cpu();
        const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
        for (std::size_t i = 0; i < c.nbytes(); ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
    });
    return h;
}

bool modules_bitwise_equal(const torch::nn::Module& a, const torch::nn::Module& b) {
    std::map<std::string, torch::Tensor> lhs;
    for_each_array(a, [&](const std::string& n, const torch::Tensor& t) { lhs[n] = t; });
    std::size_t matched = 0;
    bool equal = true;
    for_each_array(b, [&](const std::string& n, const torch::Tensor& t) {
        auto it = lhs.find(n);
        if (it == lhs.end() || it->second.sizes() != t.sizes() || it->second.scalar_type() != t.scalar_type()) {
            equal = false;
            return;
        }
        ++matched;
        auto x = it->second.detach().contiguous();
        auto y = t.detach().contiguous();
        if (std::memcmp(x.data_ptr(), y.data_ptr(), x.nbytes()) != 0) equal = false;
    });
    return equal && matched == lhs.size();
}

}  // namespace dsfwsi
