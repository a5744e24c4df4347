#include "color/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "color/error.hpp"

namespace color {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'R', 'C', 'K', 'P', 'T', '\0'};
constexpr std::size_t kHeaderSize = 20;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t offset) {
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(static_cast<T>(in[offset + i]) << (8 * i));
    return value;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("failed reading '" + path + "'");
    return bytes;
}

nlohmann::json parse_header(const std::vector<std::uint8_t>& bytes, std::size_t& payload_start) {
    if (bytes.size() < sizeof(kMagic)) throw FormatError("file too short for checkpoint magic", bytes.size());
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw FormatError("not a checkpoint file (bad magic)", 0);
    if (bytes.size() < kHeaderSize) throw FormatError("truncated checkpoint header", bytes.size());
    const auto version = get_le<std::uint32_t>(bytes, 8);
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    const auto manifest_len = get_le<std::uint64_t>(bytes, 12);
    if (manifest_len > bytes.size() - kHeaderSize)
        throw FormatError("manifest extends past end of file", bytes.size());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + kHeaderSize,
                                         bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + manifest_len));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what(), kHeaderSize + e.byte);
    }
    if (!manifest.is_object() || !manifest.contains("tensors") || !manifest["tensors"].is_array())
        throw FormatError("manifest lacks a tensor table", kHeaderSize);
    payload_start = kHeaderSize + manifest_len;
    return manifest;
}

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw DataError("checkpoint has no tensor named '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
    for (const auto& entry : tensors)
        if (entry.first == name) return true;
    return false;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
    nlohmann::json table = nlohmann::json::array();
    std::set<std::string> names;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : checkpoint.tensors) {
        if (!names.insert(name).second) throw ContractError("duplicate tensor name '" + name + "' in checkpoint");
        if (!is_single_representable(t))
            throw ContractError("tensor '" + name + "' holds values that are not exactly representable in binary32");
        table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel() * sizeof(float);
    }
    nlohmann::json manifest = {{"metadata", checkpoint.metadata}, {"tensors", table}};
    const std::string text = manifest.dump();

    std::vector<std::uint8_t> out;
    out.reserve(kHeaderSize + text.size() + offset);
    for (char ch : kMagic) out.push_back(static_cast<std::uint8_t>(ch));
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& entry : checkpoint.tensors)
        for (double v : entry.second.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
    std::size_t payload = 0;
    const nlohmann::json manifest = parse_header(bytes, payload);
    Checkpoint ck;
    ck.metadata = manifest.value("metadata", nlohmann::json::object());
    std::uint64_t expected = 0;
    for (const auto& entry : manifest["tensors"]) {
        std::string name;
        Shape shape;
        std::uint64_t offset = 0;
        try {
            name = entry.at("name").get<std::string>();
            shape = entry.at("shape").get<Shape>();
            offset = entry.at("offset").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("malformed tensor entry: ") + e.what(), kHeaderSize);
        }
        if (shape.empty() || shape_numel(shape) == 0)
            throw FormatError("tensor '" + name + "' has an empty shape", kHeaderSize);
        if (offset != expected)
            throw FormatError("tensor '" + name + "' payload is not contiguous", payload + offset);
        const std::uint64_t n = shape_numel(shape);
        const std::uint64_t start = payload + offset;
        if (start + n * sizeof(float) > bytes.size())
            throw FormatError("tensor '" + name + "' payload is truncated", bytes.size());
        std::vector<double> values(n);
        for (std::uint64_t i = 0; i < n; ++i)
            values[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, start + i * sizeof(float)));
        ck.tensors.emplace_back(name, Tensor(shape, std::move(values)));
        expected = offset + n * sizeof(float);
    }
    if (payload + expected != bytes.size())
        throw FormatError("unexpected trailing bytes after the last tensor", payload + expected);
    return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
    const std::vector<std::uint8_t> bytes = serialize_checkpoint(checkpoint);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

nlohmann::json read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<std::uint8_t> header(kHeaderSize);
    in.read(reinterpret_cast<char*>(header.data()), kHeaderSize);
    header.resize(static_cast<std::size_t>(in.gcount()));
    if (header.size() < kHeaderSize) {
        std::size_t unused = 0;
        parse_header(header, unused);  // reports the precise failure
    }
    const auto manifest_len = get_le<std::uint64_t>(header, 12);
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(in.tellg());
    if (manifest_len > file_size - kHeaderSize) throw FormatError("manifest extends past end of file", file_size);
    std::vector<std::uint8_t> bytes = header;
    bytes.resize(kHeaderSize + manifest_len);
    in.seekg(static_cast<std::streamoff>(kHeaderSize));
    in.read(reinterpret_cast<char*>(bytes.data() + kHeaderSize), static_cast<std::streamsize>(manifest_len));
    std::size_t payload = 0;
    return parse_header(bytes, payload);
}

std::uint64_t fingerprint(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    return h;
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"image_size", c.image_size}, {"channels", c.channels},   {"patch_size", c.patch_size},
            {"embed_dim", c.embed_dim},   {"num_layers", c.num_layers}, {"num_heads", c.num_heads},
            {"ffn_hidden", c.ffn_hidden}, {"layer_norm_eps", c.layer_norm_eps}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.image_size = j.at("image_size").get<std::size_t>();
        c.channels = j.at("channels").get<std::size_t>();
        c.patch_size = j.at("patch_size").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.num_layers = j.at("num_layers").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
        c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed model config in checkpoint metadata: ") + e.what());
    }
    c.validate();
    return c;
}

void append_tensors(Checkpoint& checkpoint, const NamedTensors& source, const std::string& prefix) {
    for (const auto& [name, t] : source) checkpoint.tensors.emplace_back(prefix + name, t);
}

void fill_tensors(const Checkpoint& checkpoint, const NamedTensors& target, const std::string& prefix) {
    for (const auto& [name, t] : target) {
        const Tensor& src = checkpoint.tensor(prefix + name);
        if (src.shape() != t.shape())
            throw DataError("checkpoint tensor '" + prefix + name + "' has shape " + shape_to_string(src.shape()) +
                            ", expected " + shape_to_string(t.shape()));
        Tensor dst = t;
        std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    }
}

Checkpoint backbone_checkpoint(const ViTParams& backbone) {
    Checkpoint ck;
    ck.metadata = {{"kind", "backbone"}, {"model", to_json(backbone.config)}, {"frozen", backbone.frozen}};
    append_tensors(ck, backbone.named_tensors(), "backbone.");
    return ck;
}

ViTParams backbone_from_checkpoint(const Checkpoint& checkpoint, const std::string& prefix) {
    if (!checkpoint.metadata.contains("model")) throw DataError("checkpoint metadata has no model config");
    ViTParams p = ViTParams::zeros(model_config_from_json(checkpoint.metadata["model"]));
    fill_tensors(checkpoint, p.named_tensors(), prefix);
    p.freeze();
    return p;
}

nlohmann::json expert_info(const Expert& expert) {
    return {{"dataset_id", expert.dataset_id}, {"rank", expert.adapters.rank}, {"label_map", expert.head.label_map}};
}

Checkpoint expert_checkpoint(const Expert& expert, const ModelConfig& config) {
    Checkpoint ck;
    ck.metadata = {{"kind", "expert"}, {"model", to_json(config)}, {"expert", expert_info(expert)}};
    append_tensors(ck, expert.named_tensors(), "expert.");
    return ck;
}

Expert expert_from_checkpoint(const Checkpoint& checkpoint, const std::string& prefix, const nlohmann::json& info,
                              const ModelConfig& config) {
    Expert e;
    try {
        e.dataset_id = info.at("dataset_id").get<std::string>();
        e.adapters = new_adapter_set(config, info.at("rank").get<std::size_t>(), 0, e.dataset_id);
        e.head = ClassifierHead::create(config.embed_dim, info.at("label_map").get<std::vector<int>>(), 0);
    } catch (const nlohmann::json::exception& err) {
        throw DataError(std::string("malformed expert metadata: ") + err.what());
    }
    fill_tensors(checkpoint, e.named_tensors(), prefix);
    e.seal();
    return e;
}

}  // namespace color
