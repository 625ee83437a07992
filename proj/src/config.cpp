#include "strokeseg/config.hpp"

#include <fstream>
#include <initializer_list>

namespace strokeseg {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, std::string_view section, std::initializer_list<std::string_view> known)
{
    if (!j.is_object()) throw ConfigError(std::string(section) + ": expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto k : known) ok = ok || key == k;
        if (!ok) throw ConfigError(std::string(section) + ": unknown key '" + key + "'");
    }
}

template <class T>
void read(const json& j, const char* key, T& dst)
{
    if (j.contains(key)) dst = j.at(key).get<T>();
}

void read_dims(const json& j, const char* key, Dims3& dst)
{
    if (!j.contains(key)) return;
    const auto v = j.at(key).get<std::vector<std::int64_t>>();
    if (v.size() != 3) throw ConfigError(std::string(key) + ": expected three values");
    dst = {v[0], v[1], v[2]};
}

void read_spacing(const json& j, const char* key, Spacing3& dst)
{
    if (!j.contains(key)) return;
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 3) throw ConfigError(std::string(key) + ": expected three values");
    dst = {v[0], v[1], v[2]};
}

json phantom_json(const PhantomConfig& p)
{
    return {{"dims", {p.dims[0], p.dims[1], p.dims[2]}},
            {"spacing", {p.spacing[0], p.spacing[1], p.spacing[2]}},
            {"air_hu", p.air_hu},
            {"skull_hu", p.skull_hu},
            {"skull_thickness", p.skull_thickness},
            {"csf_hu", p.csf_hu},
            {"csf_gap", p.csf_gap},
            {"brain_hu", p.brain_hu},
            {"brain_noise_sd", p.brain_noise_sd},
            {"white_noise_sd", p.white_noise_sd},
            {"noise_cell", p.noise_cell},
            {"brain_hu_min", p.brain_hu_min},
            {"brain_hu_max", p.brain_hu_max},
            {"head_coil", p.head_coil},
            {"coil_hu", p.coil_hu},
            {"lesion_offset_hu", p.lesion_offset_hu},
            {"lesion_count_min", p.lesion_count_min},
            {"lesion_count_max", p.lesion_count_max},
            {"lesion_radius_min", p.lesion_radius_min},
            {"lesion_radius_max", p.lesion_radius_max},
            {"lesion_fraction_min", p.lesion_fraction_min},
            {"lesion_fraction_max", p.lesion_fraction_max},
            {"max_retries", p.max_retries}};
}

void phantom_from(const json& j, PhantomConfig& p)
{
    reject_unknown(j, "phantom",
                   {"dims", "spacing", "air_hu", "skull_hu", "skull_thickness", "csf_hu", "csf_gap", "brain_hu",
                    "brain_noise_sd", "white_noise_sd", "noise_cell", "brain_hu_min", "brain_hu_max", "head_coil",
                    "coil_hu", "lesion_offset_hu", "lesion_count_min", "lesion_count_max", "lesion_radius_min",
                    "lesion_radius_max", "lesion_fraction_min", "lesion_fraction_max", "max_retries"});
    read_dims(j, "dims", p.dims);
    read_spacing(j, "spacing", p.spacing);
    read(j, "air_hu", p.air_hu);
    read(j, "skull_hu", p.skull_hu);
    read(j, "skull_thickness", p.skull_thickness);
    read(j, "csf_hu", p.csf_hu);
    read(j, "csf_gap", p.csf_gap);
    read(j, "brain_hu", p.brain_hu);
    read(j, "brain_noise_sd", p.brain_noise_sd);
    read(j, "white_noise_sd", p.white_noise_sd);
    read(j, "noise_cell", p.noise_cell);
    read(j, "brain_hu_min", p.brain_hu_min);
    read(j, "brain_hu_max", p.brain_hu_max);
    read(j, "head_coil", p.head_coil);
    read(j, "coil_hu", p.coil_hu);
    read(j, "lesion_offset_hu", p.lesion_offset_hu);
    read(j, "lesion_count_min", p.lesion_count_min);
    read(j, "lesion_count_max", p.lesion_count_max);
    read(j, "lesion_radius_min", p.lesion_radius_min);
    read(j, "lesion_radius_max", p.lesion_radius_max);
    read(j, "lesion_fraction_min", p.lesion_fraction_min);
    read(j, "lesion_fraction_max", p.lesion_fraction_max);
    read(j, "max_retries", p.max_retries);
}

json preprocess_json(const PreprocessConfig& p)
{
    return {{"hu_lo", p.hu_lo},
            {"hu_hi", p.hu_hi},
            {"standardize_first", p.standardize_first},
            {"connectivity", static_cast<int>(p.connectivity)}};
}

void preprocess_from(const json& j, PreprocessConfig& p)
{
    reject_unknown(j, "preprocess", {"hu_lo", "hu_hi", "standardize_first", "connectivity"});
    read(j, "hu_lo", p.hu_lo);
    read(j, "hu_hi", p.hu_hi);
    read(j, "standardize_first", p.standardize_first);
    if (j.contains("connectivity")) {
        const int c = j.at("connectivity").get<int>();
        if (c != 4 && c != 8) throw ConfigError("preprocess: connectivity must be 4 or 8");
        p.connectivity = c == 4 ? Connectivity::Four : Connectivity::Eight;
    }
}

json sampler_json(const SamplerConfig& s)
{
    return {{"patch_size", s.patch_size},
            {"patches_per_patient", s.patches_per_patient},
            {"kind", s.kind == SamplerKind::Weighted ? "weighted" : "uniform"},
            {"class_probs",
             {{"background", s.class_probs.background},
              {"healthy", s.class_probs.healthy},
              {"lesion", s.class_probs.lesion}}}};
}

void sampler_from(const json& j, SamplerConfig& s)
{
    reject_unknown(j, "sampler", {"patch_size", "patches_per_patient", "kind", "class_probs"});
    read(j, "patch_size", s.patch_size);
    read(j, "patches_per_patient", s.patches_per_patient);
    if (j.contains("kind")) {
        const auto k = j.at("kind").get<std::string>();
        if (k == "weighted")
            s.kind = SamplerKind::Weighted;
        else if (k == "uniform")
            s.kind = SamplerKind::Uniform;
        else
            throw ConfigError("sampler: kind must be weighted or uniform");
    }
    if (j.contains("class_probs")) {
        const auto& c = j.at("class_probs");
        reject_unknown(c, "sampler.class_probs", {"background", "healthy", "lesion"});
        read(c, "background", s.class_probs.background);
        read(c, "healthy", s.class_probs.healthy);
        read(c, "lesion", s.class_probs.lesion);
    }
}

json optim_json(const OptimConfig& o)
{
    return {{"lr0", o.lr0},
            {"decay_factor", o.decay_factor},
            {"decay_every", o.decay_every},
            {"lr_floor", o.lr_floor},
            {"weight_decay", o.weight_decay},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"adam_eps", o.adam_eps},
            {"batch_size", o.batch_size},
            {"total_iterations", o.total_iterations},
            {"checkpoint_every", o.checkpoint_every}};
}

void optim_from(const json& j, OptimConfig& o)
{
    reject_unknown(j, "optim",
                   {"lr0", "decay_factor", "decay_every", "lr_floor", "weight_decay", "beta1", "beta2", "adam_eps",
                    "batch_size", "total_iterations", "checkpoint_every"});
    read(j, "lr0", o.lr0);
    read(j, "decay_factor", o.decay_factor);
    read(j, "decay_every", o.decay_every);
    read(j, "lr_floor", o.lr_floor);
    read(j, "weight_decay", o.weight_decay);
    read(j, "beta1", o.beta1);
    read(j, "beta2", o.beta2);
    read(j, "adam_eps", o.adam_eps);
    read(j, "batch_size", o.batch_size);
    read(j, "total_iterations", o.total_iterations);
    read(j, "checkpoint_every", o.checkpoint_every);
}

} // namespace

void RunConfig::validate() const
{
    if (phantom_count < 2) throw ConfigError("phantom_count must be at least 2");
    phantom.validate();
    preprocess.validate();
    sampler.validate();
    unet.validate();
    optim.validate();
    if (!(loss.eps > 0.0)) throw ConfigError("loss: eps must be positive");
    grid.validate();
    if (sampler.patch_size != unet.patch_size) throw ConfigError("sampler.patch_size must equal unet.patch_size");
    if (grid.patch_size != unet.patch_size) throw ConfigError("grid.patch_size must equal unet.patch_size");
}

RunConfig desk_preset()
{
    RunConfig c;
    c.unet.levels = 3;
    c.unet.base_channels = 8;
    c.unet.patch_size = 16;
    c.sampler.patch_size = 16;
    c.grid.patch_size = 16;
    c.optim.total_iterations = 2000;
    c.optim.lr0 = 1e-3;
    c.optim.batch_size = 2;
    c.optim.checkpoint_every = 1000;
    c.preprocess.standardize_first = true;
    return c;
}

RunConfig paper_preset()
{
    RunConfig c;
    c.unet.levels = 4;
    c.unet.base_channels = 32;
    c.unet.patch_size = 128;
    c.sampler.patch_size = 128;
    c.sampler.patches_per_patient = 32;
    c.grid.patch_size = 128;
    c.grid.overlap = 0.25;
    c.optim.total_iterations = 40000;
    c.optim.batch_size = 2;
    c.preprocess.standardize_first = true;
    c.phantom.dims = {256, 256, 160};
    return c;
}

RunConfig preset(const std::string& name)
{
    if (name == "desk") return desk_preset();
    if (name == "paper") return paper_preset();
    throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

json to_json(const RunConfig& c)
{
    json unet;
    to_json(unet, c.unet);
    return {{"seed", c.seed},
            {"phantom_count", c.phantom_count},
            {"phantom", phantom_json(c.phantom)},
            {"preprocess", preprocess_json(c.preprocess)},
            {"sampler", sampler_json(c.sampler)},
            {"unet", unet},
            {"optim", optim_json(c.optim)},
            {"loss", {{"eps", c.loss.eps}, {"weighted", c.loss.weighted}}},
            {"grid", {{"patch_size", c.grid.patch_size}, {"overlap", c.grid.overlap}}},
            {"paths",
             {{"corpus", c.paths.corpus.string()},
              {"processed", c.paths.processed.string()},
              {"runs", c.paths.runs.string()}}}};
}

RunConfig merge_json(const RunConfig& base, const json& j)
{
    RunConfig c = base;
    try {
        reject_unknown(j, "config",
                       {"seed", "phantom_count", "phantom", "preprocess", "sampler", "unet", "optim", "loss", "grid",
                        "paths"});
        read(j, "seed", c.seed);
        read(j, "phantom_count", c.phantom_count);
        if (j.contains("phantom")) phantom_from(j.at("phantom"), c.phantom);
        if (j.contains("preprocess")) preprocess_from(j.at("preprocess"), c.preprocess);
        if (j.contains("sampler")) sampler_from(j.at("sampler"), c.sampler);
        if (j.contains("unet")) {
            json merged;
            to_json(merged, c.unet);
            if (!j.at("unet").is_object()) throw ConfigError("unet: expected a JSON object");
            merged.update(j.at("unet"));
            from_json(merged, c.unet);
        }
        if (j.contains("optim")) optim_from(j.at("optim"), c.optim);
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            reject_unknown(l, "loss", {"eps", "weighted"});
            read(l, "eps", c.loss.eps);
            read(l, "weighted", c.loss.weighted);
        }
        if (j.contains("grid")) {
            const auto& g = j.at("grid");
            reject_unknown(g, "grid", {"patch_size", "overlap"});
            read(g, "patch_size", c.grid.patch_size);
            read(g, "overlap", c.grid.overlap);
        }
        if (j.contains("paths")) {
            const auto& p = j.at("paths");
            reject_unknown(p, "paths", {"corpus", "processed", "runs"});
            if (p.contains("corpus")) c.paths.corpus = p.at("corpus").get<std::string>();
            if (p.contains("processed")) c.paths.processed = p.at("processed").get<std::string>();
            if (p.contains("runs")) c.paths.runs = p.at("runs").get<std::string>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return merge_json(base, j);
}

void write_effective_config(const RunConfig& c, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    json j = to_json(c);
    j["tool_version"] = std::string(tool_version());
    std::ofstream out(dir / "effective_config.json", std::ios::trunc);
    if (!out) throw Error("cannot write " + (dir / "effective_config.json").string());
    out << j.dump(2) << '\n';
}

TrainConfig train_config(const RunConfig& c)
{
    TrainConfig t;
    t.unet = c.unet;
    t.optim = c.optim;
    t.loss = c.loss;
    t.sampler = c.sampler;
    t.seed = c.seed;
    return t;
}

} // namespace strokeseg
