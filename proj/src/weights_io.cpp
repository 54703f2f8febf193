#include "emf/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "emf/io_util.hpp"

namespace emf {

namespace {

static_assert(std::endian::native == std::endian::little,
              "EMFW/EMFT serialization assumes a little-endian host");

constexpr char kWeightsMagic[4] = {'E', 'M', 'F', 'W'};
constexpr char kTensorMagic[4] = {'E', 'M', 'F', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4))
        throw FormatError(path + ": truncated file");
    return v;
}

struct ManifestEntry {
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t count = 0;
};

int require_dim(const std::map<std::string, ManifestEntry>& entries,
                const std::string& name, int axis, const std::string& path) {
    auto it = entries.find(name);
    if (it == entries.end())
        throw FormatError(path + ": manifest is missing tensor \"" + name + "\"");
    if (axis >= static_cast<int>(it->second.shape.size()))
        throw FormatError(path + ": tensor \"" + name + "\" has too few dimensions");
    return it->second.shape[static_cast<std::size_t>(axis)];
}

// The manifest fully determines the architecture: widths, kernels and level
// set are read back off tensor names and shapes.
ModelConfig config_from_manifest(const std::map<std::string, ManifestEntry>& entries,
                                 ModelForm form, const std::string& path) {
    ModelConfig cfg;
    cfg.epe_channels = require_dim(entries, "epe.pw.w", 0, path);
    cfg.input_channels = require_dim(entries, "epe.pw.w", 1, path);
    cfg.stage_channels.clear();
    for (int i = 1; i <= 4; ++i)
        cfg.stage_channels.push_back(
            require_dim(entries, "stage" + std::to_string(i) + ".root.pw.w", 0, path));

    if (form == ModelForm::fused) {
        cfg.large_kernel = require_dim(entries, "stage1.root.down1.w", 2, path);
        cfg.mixer_kernel = require_dim(entries, "stage1.block1.mixer.w", 2, path);
    } else {
        cfg.large_kernel = 3;
        for (int k = 3; k <= 31; k += 2) {
            if (entries.count("stage1.root.down1.k" + std::to_string(k) + ".w"))
                cfg.large_kernel = k;
        }
        cfg.mixer_kernel = require_dim(entries, "stage1.block1.mixer.dw.w", 2, path);
    }
    cfg.ffn_kernel = require_dim(entries, "stage1.block1.ffn.dw.w", 2, path);
    cfg.ffn_expansion =
        require_dim(entries, "stage1.block1.ffn.expand.w", 0, path) / cfg.stage_channels[0];

    cfg.blocks_per_stage = 0;
    while (entries.count("stage1.block" + std::to_string(cfg.blocks_per_stage + 1) +
                         ".ffn.expand.w"))
        ++cfg.blocks_per_stage;

    cfg.detection_levels.clear();
    for (int l = 1; l <= 4; ++l)
        if (entries.count("head.fpn.lateral" + std::to_string(l) + ".w"))
            cfg.detection_levels.push_back(l);

    cfg.head_width = require_dim(entries, "head.stem.w", 0, path);
    cfg.num_classes = require_dim(entries, "head.cls_out.w", 0, path);
    cfg.validate();
    return cfg;
}

}  // namespace

void save_model(const std::string& path, const Model& m) {
    std::vector<ParamView> views = parameter_views(const_cast<Model&>(m));

    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    for (const ParamView& v : views) {
        manifest.push_back({{"name", v.name},
                            {"shape", v.shape},
                            {"dtype", "f32"},
                            {"offset", offset},
                            {"form", form_name(m.form)}});
        offset += v.count * sizeof(float);
    }
    const std::string text = manifest.dump();

    AtomicFileWriter out(path);
    out.write(kWeightsMagic, 4);
    std::string len;
    put_u32(len, static_cast<std::uint32_t>(text.size()));
    out.write(len);
    out.write(text);
    for (const ParamView& v : views) out.write(v.data, v.count * sizeof(float));
    out.commit();
}

namespace {

std::pair<std::map<std::string, ManifestEntry>, ModelForm> read_manifest(
    std::ifstream& in, const std::string& path) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kWeightsMagic, 4) != 0)
        throw FormatError(path + ": not an EMFW weights file");
    const std::uint32_t len = read_u32(in, path);
    std::string text(len, '\0');
    if (!in.read(text.data(), len)) throw FormatError(path + ": truncated manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": manifest: " + e.what());
    }
    if (!manifest.is_array()) throw FormatError(path + ": manifest must be a JSON list");

    std::map<std::string, ManifestEntry> entries;
    std::string form_str;
    for (const nlohmann::json& e : manifest) {
        for (const char* key : {"name", "shape", "dtype", "offset", "form"})
            if (!e.contains(key))
                throw FormatError(path + ": manifest entry missing \"" + std::string(key) + "\"");
        if (e.at("dtype").get<std::string>() != "f32")
            throw FormatError(path + ": unsupported dtype " + e.at("dtype").dump());
        const std::string f = e.at("form").get<std::string>();
        if (form_str.empty())
            form_str = f;
        else if (form_str != f)
            throw FormatError(path + ": inconsistent form markers in manifest");
        ManifestEntry me;
        me.shape = e.at("shape").get<std::vector<int>>();
        me.offset = e.at("offset").get<std::size_t>();
        me.count = 1;
        for (int d : me.shape) me.count *= static_cast<std::size_t>(d);
        if (!entries.emplace(e.at("name").get<std::string>(), me).second)
            throw FormatError(path + ": duplicate tensor \"" +
                              e.at("name").get<std::string>() + "\"");
    }
    if (form_str != "train" && form_str != "fused")
        throw FormatError(path + ": unknown form \"" + form_str + "\"");
    return {std::move(entries),
            form_str == "train" ? ModelForm::train : ModelForm::fused};
}

}  // namespace

ModelForm peek_model_form(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return read_manifest(in, path).second;
}

Model load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    auto [entries, form] = read_manifest(in, path);

    const std::streampos blob_start = in.tellg();
    in.seekg(0, std::ios::end);
    const std::size_t blob_size = static_cast<std::size_t>(in.tellg() - blob_start);

    Model m = build_model_skeleton(config_from_manifest(entries, form, path), form);
    std::vector<ParamView> views = parameter_views(m);
    if (views.size() != entries.size())
        throw FormatError(path + ": manifest lists " + std::to_string(entries.size()) +
                          " tensors, architecture needs " + std::to_string(views.size()));
    for (ParamView& v : views) {
        auto it = entries.find(v.name);
        if (it == entries.end())
            throw FormatError(path + ": manifest is missing tensor \"" + v.name + "\"");
        if (it->second.shape != v.shape)
            throw FormatError(path + ": tensor \"" + v.name + "\" has unexpected shape");
        const std::size_t bytes = v.count * sizeof(float);
        if (it->second.offset + bytes > blob_size)
            throw FormatError(path + ": tensor \"" + v.name + "\" overruns the blob");
        in.seekg(blob_start + static_cast<std::streamoff>(it->second.offset));
        if (!in.read(reinterpret_cast<char*>(v.data), static_cast<std::streamsize>(bytes)))
            throw FormatError(path + ": short read on tensor \"" + v.name + "\"");
    }
    return m;
}

void write_tensor_file(const std::string& path, const Tensor& t) {
    AtomicFileWriter out(path);
    out.write(kTensorMagic, 4);
    std::string header;
    put_u32(header, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(header, static_cast<std::uint32_t>(d));
    out.write(header);
    out.write(t.data(), t.size() * sizeof(float));
    out.commit();
}

Tensor read_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0)
        throw FormatError(path + ": not an EMFT tensor file");
    const std::uint32_t rank = read_u32(in, path);
    if (rank < 1 || rank > 4) throw FormatError(path + ": unsupported rank");
    std::vector<int> shape;
    for (std::uint32_t i = 0; i < rank; ++i)
        shape.push_back(static_cast<int>(read_u32(in, path)));
    Tensor t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(float))))
        throw FormatError(path + ": truncated tensor data");
    char extra;
    if (in.read(&extra, 1)) throw FormatError(path + ": trailing bytes");
    return t;
}

}  // namespace emf
