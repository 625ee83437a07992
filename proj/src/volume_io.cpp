#include "strokeseg/volume_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

namespace strokeseg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// little-endian primitives

namespace le {

namespace {
template <class U>
void put(std::vector<std::uint8_t>& out, U v)
{
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get(std::span<const std::uint8_t> in, std::size_t& pos)
{
    if (pos + sizeof(U) > in.size()) throw Error("unexpected end of data");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in[pos + i]) << (8 * i));
    pos += sizeof(U);
    return v;
}
} // namespace

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) { put(out, v); }
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) { put(out, v); }
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) { put(out, v); }
void put_f32(std::vector<std::uint8_t>& out, float v) { put(out, std::bit_cast<std::uint32_t>(v)); }
std::uint16_t get_u16(std::span<const std::uint8_t> in, std::size_t& pos) { return get<std::uint16_t>(in, pos); }
std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t& pos) { return get<std::uint32_t>(in, pos); }
std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t& pos) { return get<std::uint64_t>(in, pos); }
float get_f32(std::span<const std::uint8_t> in, std::size_t& pos) { return std::bit_cast<float>(get<std::uint32_t>(in, pos)); }

} // namespace le

std::vector<std::uint8_t> read_file_bytes(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open file: " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(size);
    if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
        throw Error("cannot read file: " + path.string());
    return bytes;
}

void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write file: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("cannot write file: " + path.string());
}

// ---------------------------------------------------------------------------

Volume Volume::filled(const Dims3& dims, float value, const Spacing3& spacing, IntensityKind kind)
{
    Volume v;
    v.dims = dims;
    v.spacing = spacing;
    v.kind = kind;
    v.data.assign(static_cast<std::size_t>(voxel_count(dims)), value);
    return v;
}

namespace {

void check_dims(const Dims3& dims)
{
    for (auto d : dims)
        if (d <= 0) throw Error("dims must be positive");
}

void check_spacing(const Spacing3& spacing)
{
    for (auto s : spacing)
        if (!(s > 0.0) || !std::isfinite(s)) throw Error("spacing must be strictly positive");
}

} // namespace

void Volume::validate() const
{
    check_dims(dims);
    check_spacing(spacing);
    if (static_cast<std::int64_t>(data.size()) != size())
        throw Error("volume data length " + std::to_string(data.size()) + " does not match dims product " +
                    std::to_string(size()));
    if (kind == IntensityKind::Normalized) {
        for (float v : data)
            if (!(v >= 0.0f && v <= 1.0f)) throw Error("normalized volume has values outside [0,1]");
    }
    if (dtype == DType::I16) {
        for (float v : data)
            if (v != std::nearbyint(v) || v < -32768.0f || v > 32767.0f)
                throw Error("i16 volume holds a non-integral or out-of-range value");
    }
}

Mask Mask::zeros(const Dims3& dims, const Spacing3& spacing)
{
    Mask m;
    m.dims = dims;
    m.spacing = spacing;
    m.data.assign(static_cast<std::size_t>(voxel_count(dims)), 0);
    return m;
}

std::int64_t Mask::count_ones() const
{
    std::int64_t n = 0;
    for (auto v : data) n += v;
    return n;
}

void Mask::validate() const
{
    check_dims(dims);
    check_spacing(spacing);
    if (static_cast<std::int64_t>(data.size()) != size()) throw Error("mask data length does not match dims product");
    for (auto v : data)
        if (v > 1) throw Error("mask holds a non-binary value " + std::to_string(v));
}

const ManifestEntry& Manifest::find(std::string_view patient_id) const
{
    for (const auto& e : entries)
        if (e.patient_id == patient_id) return e;
    throw Error("patient not in manifest: " + std::string(patient_id));
}

// ---------------------------------------------------------------------------

fs::path sidecar_path(const fs::path& path)
{
    fs::path p = path;
    if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
    p += ".json";
    return p;
}

fs::path raw_path(const fs::path& path)
{
    fs::path p = path;
    if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
    p += ".raw";
    return p;
}

namespace {

struct Sidecar {
    Dims3 dims{};
    Spacing3 spacing{};
    std::string dtype;
    std::string kind;
    std::optional<CropInfo> crop;
};

Sidecar read_sidecar(const fs::path& path)
{
    const fs::path sp = sidecar_path(path);
    if (!fs::exists(sp)) throw Error("missing sidecar: " + sp.string());
    std::ifstream in(sp);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error("malformed sidecar " + sp.string() + ": " + e.what());
    }
    Sidecar s;
    try {
        const auto dims = j.at("dims").get<std::vector<std::int64_t>>();
        const auto spacing = j.at("spacing").get<std::vector<double>>();
        if (dims.size() != 3 || spacing.size() != 3) throw Error("sidecar dims/spacing must have 3 entries");
        for (int i = 0; i < 3; ++i) {
            s.dims[i] = dims[i];
            s.spacing[i] = spacing[i];
        }
        s.dtype = j.at("dtype").get<std::string>();
        s.kind = j.at("kind").get<std::string>();
        if (j.contains("crop_origin")) {
            CropInfo c;
            const auto o = j.at("crop_origin").get<std::vector<std::int64_t>>();
            const auto sd = j.at("source_dims").get<std::vector<std::int64_t>>();
            if (o.size() != 3 || sd.size() != 3) throw Error("sidecar crop_origin/source_dims must have 3 entries");
            for (int i = 0; i < 3; ++i) {
                c.origin[i] = o[i];
                c.source_dims[i] = sd[i];
            }
            s.crop = c;
        }
    } catch (const json::exception& e) {
        throw Error("malformed sidecar " + sp.string() + ": " + e.what());
    }
    check_dims(s.dims);
    check_spacing(s.spacing);
    return s;
}

void write_sidecar(const fs::path& path, const Dims3& dims, const Spacing3& spacing, std::string_view dtype,
                   std::string_view kind, const std::optional<CropInfo>& crop)
{
    json j;
    j["dims"] = {dims[0], dims[1], dims[2]};
    j["spacing"] = {spacing[0], spacing[1], spacing[2]};
    j["dtype"] = dtype;
    j["kind"] = kind;
    if (crop) {
        j["crop_origin"] = {crop->origin[0], crop->origin[1], crop->origin[2]};
        j["source_dims"] = {crop->source_dims[0], crop->source_dims[1], crop->source_dims[2]};
    }
    std::ofstream out(sidecar_path(path), std::ios::trunc);
    if (!out) throw Error("cannot write sidecar: " + sidecar_path(path).string());
    out << j.dump(2) << '\n';
    if (!out) throw Error("cannot write sidecar: " + sidecar_path(path).string());
}

std::vector<std::uint8_t> read_body(const fs::path& path, std::int64_t voxels, std::size_t bytes_per_voxel)
{
    const fs::path rp = raw_path(path);
    if (!fs::exists(rp)) throw Error("missing raw body: " + rp.string());
    auto bytes = read_file_bytes(rp);
    const auto expected = static_cast<std::size_t>(voxels) * bytes_per_voxel;
    if (bytes.size() != expected)
        throw Error("raw length mismatch for " + rp.string() + ": expected " + std::to_string(expected) +
                    " bytes, found " + std::to_string(bytes.size()));
    return bytes;
}

} // namespace

Volume load_volume(const fs::path& path)
{
    const Sidecar s = read_sidecar(path);
    Volume v;
    v.dims = s.dims;
    v.spacing = s.spacing;
    v.crop = s.crop;
    if (s.kind == "hu")
        v.kind = IntensityKind::HU;
    else if (s.kind == "normalized")
        v.kind = IntensityKind::Normalized;
    else
        throw Error("unknown volume kind tag: " + s.kind);

    const std::int64_t n = voxel_count(s.dims);
    v.data.resize(static_cast<std::size_t>(n));
    std::size_t pos = 0;
    if (s.dtype == "f32le") {
        v.dtype = DType::F32;
        const auto bytes = read_body(path, n, 4);
        for (auto& x : v.data) x = le::get_f32(bytes, pos);
    } else if (s.dtype == "i16le") {
        v.dtype = DType::I16;
        const auto bytes = read_body(path, n, 2);
        for (auto& x : v.data) x = static_cast<float>(static_cast<std::int16_t>(le::get_u16(bytes, pos)));
    } else {
        throw Error("unknown dtype tag: " + s.dtype);
    }
    v.validate();
    return v;
}

void save_volume(const Volume& vol, const fs::path& path)
{
    vol.validate();
    std::vector<std::uint8_t> body;
    body.reserve(vol.data.size() * (vol.dtype == DType::F32 ? 4 : 2));
    if (vol.dtype == DType::F32) {
        for (float x : vol.data) le::put_f32(body, x);
    } else {
        for (float x : vol.data) le::put_u16(body, static_cast<std::uint16_t>(static_cast<std::int16_t>(x)));
    }
    write_file_bytes(raw_path(path), body);
    write_sidecar(path, vol.dims, vol.spacing, vol.dtype == DType::F32 ? "f32le" : "i16le",
                  vol.kind == IntensityKind::HU ? "hu" : "normalized", vol.crop);
}

Mask load_mask(const fs::path& path)
{
    const Sidecar s = read_sidecar(path);
    if (s.dtype != "u8le") throw Error("mask must have dtype u8le, found " + s.dtype);
    if (s.kind != "mask") throw Error("expected kind mask, found " + s.kind);
    Mask m;
    m.dims = s.dims;
    m.spacing = s.spacing;
    m.crop = s.crop;
    m.data = read_body(path, voxel_count(s.dims), 1);
    m.validate();
    return m;
}

void save_mask(const Mask& mask, const fs::path& path)
{
    mask.validate();
    write_file_bytes(raw_path(path), mask.data);
    write_sidecar(path, mask.dims, mask.spacing, "u8le", "mask", mask.crop);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

std::string trim(std::string s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

Manifest load_manifest(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest: " + path.string());
    const fs::path base = path.parent_path();
    Manifest m;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        if (!header_seen) {
            header_seen = true;
            if (line != "patient_id,volume_path,mask_path,fold")
                throw Error("manifest header must be 'patient_id,volume_path,mask_path,fold'");
            continue;
        }
        auto cells = split_csv_line(line);
        if (cells.size() != 4) throw Error("malformed manifest row " + std::to_string(line_no));
        for (auto& c : cells) c = trim(c);
        ManifestEntry e;
        e.patient_id = cells[0];
        if (e.patient_id.empty()) throw Error("empty patient_id on row " + std::to_string(line_no));
        if (!seen.insert(e.patient_id).second) throw Error("duplicate patient_id: " + e.patient_id);
        e.volume_path = fs::path(cells[1]).is_absolute() ? fs::path(cells[1]) : base / cells[1];
        e.mask_path = fs::path(cells[2]).is_absolute() ? fs::path(cells[2]) : base / cells[2];
        if (!cells[3].empty()) {
            std::size_t used = 0;
            int fold = 0;
            try {
                fold = std::stoi(cells[3], &used);
            } catch (const std::exception&) {
                throw Error("malformed fold on row " + std::to_string(line_no));
            }
            if (used != cells[3].size()) throw Error("malformed fold on row " + std::to_string(line_no));
            if (fold < 0 || fold > 4) throw Error("fold outside [0,4] on row " + std::to_string(line_no));
            e.fold = fold;
        }
        for (const auto& p : {e.volume_path, e.mask_path}) {
            if (!fs::exists(sidecar_path(p)) || !fs::exists(raw_path(p)))
                throw Error("manifest references missing file: " + p.string());
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

void save_manifest(const Manifest& manifest, const fs::path& path)
{
    const fs::path base = path.parent_path();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write manifest: " + path.string());
    auto rel = [&](const fs::path& p) {
        std::error_code ec;
        auto r = fs::relative(p, base.empty() ? fs::path(".") : base, ec);
        return (ec || r.empty()) ? p.generic_string() : r.generic_string();
    };
    out << "patient_id,volume_path,mask_path,fold\n";
    for (const auto& e : manifest.entries) {
        out << e.patient_id << ',' << rel(e.volume_path) << ',' << rel(e.mask_path) << ',';
        if (e.fold) out << *e.fold;
        out << '\n';
    }
    if (!out) throw Error("cannot write manifest: " + path.string());
}

void validate_pair(const Volume& vol, const Mask& mask)
{
    if (vol.dims != mask.dims) throw Error("volume and mask dims differ");
    mask.validate();
    if (static_cast<std::int64_t>(vol.data.size()) != vol.size()) throw Error("volume data length does not match dims");
}

} // namespace strokeseg
