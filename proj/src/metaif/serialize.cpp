#include "metaif/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "metaif/error.hpp"
#include "metaif/json_util.hpp"

namespace metaif {

using nlohmann::json;

namespace {

constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void vec(std::span<const double> v) {
        u64(v.size());
        for (double x : v) f64(x);
    }
    void matrix(const DenseMatrix& m) {
        u64(m.rows());
        u64(m.cols());
        for (double x : m.data()) f64(x);
    }
    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) fail(ErrorCode::io, "cannot write " + path.string());
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) fail(ErrorCode::io, "write failed for " + path.string());
    }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) fail(ErrorCode::io, "cannot open " + path.string());
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    std::string magic() {
        need(4);
        std::string m(buf_.data() + pos_, 4);
        pos_ += 4;
        return m;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    Vector vec() {
        const std::uint64_t n = u64();
        need(n * 8);
        Vector v(n);
        for (double& x : v) x = f64();
        return v;
    }
    DenseMatrix matrix() {
        const std::uint64_t r = u64(), c = u64();
        need(r * c * 8);
        Vector d(r * c);
        for (double& x : d) x = f64();
        return DenseMatrix(r, c, std::move(d));
    }
    void expect_end() const {
        if (pos_ != buf_.size()) fail(ErrorCode::parse, path_.string() + ": trailing bytes");
    }
    [[noreturn]] void bad(const std::string& what) const { fail(ErrorCode::parse, path_.string() + ": " + what); }

private:
    void need(std::uint64_t n) const {
        if (n > buf_.size() - pos_) bad("truncated file");
    }
    std::filesystem::path path_;
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

void put_arch(Writer& w, const Architecture& a) {
    w.u32(static_cast<std::uint32_t>(a.layer_sizes().size()));
    for (std::size_t s : a.layer_sizes()) w.u64(s);
    w.u32(static_cast<std::uint32_t>(a.activations().size()));
    for (Activation act : a.activations()) w.u8(static_cast<std::uint8_t>(act));
}

Architecture get_arch(Reader& r) {
    const std::uint32_t ns = r.u32();
    if (ns > 1024) r.bad("implausible layer count");
    std::vector<std::size_t> sizes(ns);
    for (auto& s : sizes) s = r.u64();
    const std::uint32_t na = r.u32();
    if (na > 1024) r.bad("implausible activation count");
    std::vector<Activation> acts(na);
    for (auto& a : acts) {
        const std::uint8_t code = r.u8();
        if (code > 2) r.bad("unknown activation code");
        a = static_cast<Activation>(code);
    }
    try {
        return Architecture(std::move(sizes), std::move(acts));
    } catch (const Error& e) {
        r.bad(std::string("bad architecture header: ") + e.what());
    }
}

void header(Writer& w, const char* magic) {
    w.bytes(magic, 4);
    w.u32(kVersion);
}

void check_header(Reader& r, const char* magic) {
    if (r.magic() != magic) r.bad(std::string("not a ") + magic + " container");
    if (r.u32() != kVersion) r.bad("unsupported container version");
}

using jsonu::get_field;

}  // namespace

void write_param_vector(const std::filesystem::path& path, const ParamVector& p) {
    Writer w;
    header(w, "MIFP");
    put_arch(w, p.arch);
    w.vec(p.values);
    w.save(path);
}

ParamVector read_param_vector(const std::filesystem::path& path) {
    Reader r(path);
    check_header(r, "MIFP");
    Architecture arch = get_arch(r);
    Vector v = r.vec();
    r.expect_end();
    try {
        return ParamVector(std::move(arch), std::move(v));
    } catch (const Error& e) {
        r.bad(e.what());
    }
}

void write_vector(const std::filesystem::path& path, std::span<const double> v) {
    Writer w;
    header(w, "MIFV");
    w.vec(v);
    w.save(path);
}

Vector read_vector(const std::filesystem::path& path) {
    Reader r(path);
    const std::string m = r.magic();
    if (r.u32() != kVersion) r.bad("unsupported container version");
    if (m == "MIFP") get_arch(r);
    else if (m != "MIFV") r.bad("not a vector container");
    Vector v = r.vec();
    r.expect_end();
    return v;
}

void write_ekfac(const std::filesystem::path& path, const EkfacState& st) {
    Writer w;
    header(w, "MIFE");
    put_arch(w, st.arch);
    w.u64(st.num_examples);
    w.u64(st.layers.size());
    for (const EkfacLayer& l : st.layers) {
        w.matrix(l.omega);
        w.matrix(l.gamma);
        w.matrix(l.omega_eig.eigenvectors);
        w.vec(l.omega_eig.eigenvalues);
        w.matrix(l.gamma_eig.eigenvectors);
        w.vec(l.gamma_eig.eigenvalues);
        w.vec(l.lambda_star);
        w.f64(l.damping);
    }
    w.save(path);
}

EkfacState read_ekfac(const std::filesystem::path& path) {
    Reader r(path);
    check_header(r, "MIFE");
    EkfacState st;
    st.arch = get_arch(r);
    st.num_examples = r.u64();
    const std::uint64_t n = r.u64();
    if (n != st.arch.num_layers()) r.bad("layer count does not match the architecture");
    st.layers.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        EkfacLayer& l = st.layers[i];
        l.omega = r.matrix();
        l.gamma = r.matrix();
        l.omega_eig.eigenvectors = r.matrix();
        l.omega_eig.eigenvalues = r.vec();
        l.gamma_eig.eigenvectors = r.matrix();
        l.gamma_eig.eigenvalues = r.vec();
        l.lambda_star = r.vec();
        l.damping = r.f64();
        const LayerShape& s = st.arch.layers()[i];
        if (l.omega.rows() != s.cols() || l.gamma.rows() != s.out || l.lambda_star.size() != s.size())
            r.bad("layer " + std::to_string(i) + " shapes do not match the architecture");
    }
    r.expect_end();
    return st;
}

json architecture_to_json(const Architecture& arch) {
    json acts = json::array();
    for (Activation a : arch.activations()) acts.push_back(activation_name(a));
    return {{"layer_sizes", arch.layer_sizes()}, {"activations", acts}};
}

Architecture architecture_from_json(const json& j, const std::string& where) {
    if (!j.is_object()) fail(ErrorCode::config, where + ": expected an object");
    std::vector<std::size_t> sizes;
    std::vector<Activation> acts;
    try {
        sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
    } catch (const json::exception&) {
        fail(ErrorCode::config, where + ".layer_sizes: expected an array of positive integers");
    }
    if (j.contains("activations")) {
        if (!j["activations"].is_array()) fail(ErrorCode::config, where + ".activations: expected an array");
        for (std::size_t i = 0; i < j["activations"].size(); ++i) {
            const json& a = j["activations"][i];
            if (!a.is_string()) fail(ErrorCode::config, where + ".activations[" + std::to_string(i) + "]: expected a string");
            try {
                acts.push_back(parse_activation(a.get<std::string>()));
            } catch (const Error& e) {
                fail(ErrorCode::config, where + ".activations[" + std::to_string(i) + "]: " + e.what());
            }
        }
    } else if (sizes.size() > 2) {
        acts.assign(sizes.size() - 2, Activation::tanh);
    }
    try {
        return Architecture(std::move(sizes), std::move(acts));
    } catch (const Error& e) {
        fail(ErrorCode::config, where + ": " + e.what());
    }
}

json param_vector_to_json(const ParamVector& p) {
    json layers = json::array();
    for (const LayerShape& s : p.arch.layers())
        layers.push_back({{"in", s.in}, {"out", s.out}, {"offset", s.offset}});
    return {{"architecture", architecture_to_json(p.arch)}, {"layers", layers}, {"values", p.values}};
}

json bilevel_config_to_json(const BilevelConfig& c) {
    return {{"delta", c.delta},
            {"inner_tol", c.inner_tol},
            {"inner_max_iters", c.inner_max_iters},
            {"outer_tol", c.outer_tol},
            {"outer_max_iters", c.outer_max_iters},
            {"outer_step", c.outer_step},
            {"outer_reg_form", reg_form_name(c.outer_reg_form)},
            {"outer_method", outer_method_name(c.outer_method)},
            {"newton_max_params", c.newton_max_params},
            {"lbfgs_memory", c.lbfgs_memory},
            {"threads", c.threads}};
}

BilevelConfig bilevel_config_from_json(const json& j, const std::string& where) {
    if (!j.is_object()) fail(ErrorCode::config, where + ": expected an object");
    static const char* known[] = {"delta",        "inner_tol",  "inner_max_iters", "outer_tol",         "outer_max_iters",
                                  "outer_step",   "outer_reg_form", "outer_method", "newton_max_params", "lbfgs_memory", "threads"};
    for (const auto& [k, v] : j.items()) {
        if (std::find(std::begin(known), std::end(known), k) == std::end(known))
            fail(ErrorCode::config, where + "." + k + ": unknown field");
    }
    BilevelConfig c;
    c.delta = get_field(j, "delta", where, c.delta);
    c.inner_tol = get_field(j, "inner_tol", where, c.inner_tol);
    c.inner_max_iters = get_field(j, "inner_max_iters", where, c.inner_max_iters);
    c.outer_tol = get_field(j, "outer_tol", where, c.outer_tol);
    c.outer_max_iters = get_field(j, "outer_max_iters", where, c.outer_max_iters);
    c.outer_step = get_field(j, "outer_step", where, c.outer_step);
    const std::string form = get_field<std::string>(j, "outer_reg_form", where, reg_form_name(c.outer_reg_form));
    try {
        c.outer_reg_form = parse_reg_form(form);
    } catch (const Error& e) {
        fail(ErrorCode::config, where + ".outer_reg_form: " + e.what());
    }
    const std::string method = get_field<std::string>(j, "outer_method", where, outer_method_name(c.outer_method));
    try {
        c.outer_method = parse_outer_method(method);
    } catch (const Error& e) {
        fail(ErrorCode::config, where + ".outer_method: " + e.what());
    }
    c.newton_max_params = get_field(j, "newton_max_params", where, c.newton_max_params);
    c.lbfgs_memory = get_field(j, "lbfgs_memory", where, c.lbfgs_memory);
    c.threads = get_field(j, "threads", where, c.threads);
    try {
        c.validate();
    } catch (const Error& e) {
        // validate() names fields as "bilevel.<field>"; rebase onto `where`.
        std::string msg = e.what();
        if (msg.rfind("bilevel.", 0) == 0) msg = where + msg.substr(7);
        fail(ErrorCode::config, msg);
    }
    return c;
}

void save_checkpoint(const std::filesystem::path& dir, const MetaState& state, const Architecture* arch,
                     const json& extra) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());
    auto put = [&](const std::filesystem::path& p, const Vector& v) {
        if (arch) write_param_vector(p, ParamVector(*arch, v));
        else write_vector(p, v);
    };
    put(dir / "lambda.bin", state.lambda_star);
    json tasks = json::array();
    for (std::size_t i = 0; i < state.task_ids.size(); ++i) {
        const std::string file = "theta_" + std::to_string(state.task_ids[i]) + ".bin";
        put(dir / file, state.thetas[i]);
        tasks.push_back({{"id", state.task_ids[i]},
                         {"theta", file},
                         {"inner_grad_norm", i < state.inner_grad_norms.size() ? state.inner_grad_norms[i] : 0.0}});
    }
    json m = {{"format", "metaif-checkpoint"},
              {"version", 1},
              {"lambda", "lambda.bin"},
              {"config", bilevel_config_to_json(state.config)},
              {"seed", state.seed},
              {"converged", state.converged},
              {"outer_grad_norm", state.outer_grad_norm},
              {"outer_iterations", state.outer_iterations},
              {"tasks", tasks},
              {"extra", extra}};
    if (arch) m["architecture"] = architecture_to_json(*arch);
    std::ofstream out(dir / "manifest.json");
    if (!out) fail(ErrorCode::io, "cannot write " + (dir / "manifest.json").string());
    out << m.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const auto mpath = dir / "manifest.json";
    std::ifstream in(mpath);
    if (!in) fail(ErrorCode::io, "cannot open " + mpath.string());
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        fail(ErrorCode::parse, mpath.string() + ": " + e.what());
    }
    if (m.value("format", "") != "metaif-checkpoint") fail(ErrorCode::parse, mpath.string() + ": not a checkpoint");
    Checkpoint cp;
    try {
        cp.state.config = bilevel_config_from_json(m.at("config"), "config");
        cp.state.seed = m.at("seed").get<std::uint64_t>();
        cp.state.converged = m.at("converged").get<bool>();
        cp.state.outer_grad_norm = m.at("outer_grad_norm").get<double>();
        cp.state.outer_iterations = m.at("outer_iterations").get<int>();
        cp.state.lambda_star = read_vector(dir / m.at("lambda").get<std::string>());
        for (const json& t : m.at("tasks")) {
            cp.state.task_ids.push_back(t.at("id").get<int>());
            cp.state.thetas.push_back(read_vector(dir / t.at("theta").get<std::string>()));
            cp.state.inner_grad_norms.push_back(t.at("inner_grad_norm").get<double>());
        }
        if (m.contains("architecture")) cp.arch = architecture_from_json(m["architecture"]);
        cp.extra = m.value("extra", json::object());
    } catch (const json::exception& e) {
        fail(ErrorCode::parse, mpath.string() + ": " + e.what());
    }
    for (const Vector& t : cp.state.thetas)
        if (t.size() != cp.state.lambda_star.size()) fail(ErrorCode::parse, mpath.string() + ": θ/λ length mismatch");
    return cp;
}

json influence_manifest(const InfluenceVector& inf) {
    return {{"format", "metaif-influence"},
            {"version", 1},
            {"kind", influence_kind_name(inf.kind)},
            {"task_id", inf.task_id},
            {"example_index", inf.example_index},
            {"backend", backend_name(inf.backend)},
            {"edit_sign", inf.edit_sign},
            {"norm", norm2(inf.delta)},
            {"diagnostics", inf.diagnostics}};
}

void save_influence(const std::filesystem::path& stem, const InfluenceVector& inf) {
    std::filesystem::path bin = stem, js = stem;
    bin += ".bin";
    js += ".json";
    write_vector(bin, inf.delta);
    json m = influence_manifest(inf);
    m["payload"] = bin.filename().string();
    std::ofstream out(js);
    if (!out) fail(ErrorCode::io, "cannot write " + js.string());
    out << m.dump(2) << '\n';
}

InfluenceVector load_influence(const std::filesystem::path& stem) {
    std::filesystem::path js = stem;
    js += ".json";
    std::ifstream in(js);
    if (!in) fail(ErrorCode::io, "cannot open " + js.string());
    InfluenceVector inf;
    try {
        json m;
        in >> m;
        if (m.value("format", "") != "metaif-influence") fail(ErrorCode::parse, js.string() + ": not an influence file");
        inf.kind = parse_influence_kind(m.at("kind").get<std::string>());
        inf.task_id = m.at("task_id").get<int>();
        inf.example_index = m.at("example_index").get<long>();
        inf.backend = parse_backend(m.at("backend").get<std::string>());
        inf.edit_sign = m.at("edit_sign").get<int>();
        inf.diagnostics = m.value("diagnostics", std::map<std::string, double>{});
        inf.delta = read_vector(js.parent_path() / m.at("payload").get<std::string>());
    } catch (const json::exception& e) {
        fail(ErrorCode::parse, js.string() + ": " + e.what());
    }
    return inf;
}

}  // namespace metaif
