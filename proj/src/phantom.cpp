#include <algorithm>
#include <cmath>
#include <numeric>

#include "voxcomp/corpus.hpp"
#include "voxcomp/error.hpp"

namespace voxcomp {

using json = nlohmann::json;

namespace {

std::string kind_name(PrimitiveKind k) {
    switch (k) {
        case PrimitiveKind::ellipsoid: return "ellipsoid";
        case PrimitiveKind::tube: return "tube";
        case PrimitiveKind::box: return "box";
        case PrimitiveKind::lattice: return "lattice";
    }
    return "?";
}

PrimitiveKind kind_from_name(const std::string& s) {
    if (s == "ellipsoid") return PrimitiveKind::ellipsoid;
    if (s == "tube") return PrimitiveKind::tube;
    if (s == "box") return PrimitiveKind::box;
    if (s == "lattice") return PrimitiveKind::lattice;
    throw InvalidSpecError("unknown primitive kind '" + s + "'");
}

/// A placed primitive: membership test at a given scale.
struct Placement {
    PrimitiveKind kind;
    std::array<double, 3> center;  // voxel coordinates
    std::array<double, 3> radius;  // voxel units at scale 1
    double rib_period = 4.0;

    bool contains(double l, double w, double h, double scale) const {
        const double dl = (l - center[0]) / (radius[0] * scale);
        const double dw = (w - center[1]) / (radius[1] * scale);
        const double dh = h - center[2];
        switch (kind) {
            case PrimitiveKind::ellipsoid: {
                const double dz = dh / (radius[2] * scale);
                return dl * dl + dw * dw + dz * dz <= 1.0;
            }
            case PrimitiveKind::box:
                return std::abs(dl) <= 1.0 && std::abs(dw) <= 1.0 && std::abs(dh) <= radius[2] * scale;
            case PrimitiveKind::tube:
                return std::abs(dh) <= radius[2] && dl * dl + dw * dw <= 1.0;
            case PrimitiveKind::lattice: {
                if (std::abs(dh) > radius[2]) return false;
                // Rings of fixed radius whose shell thickness grows with scale.
                const double ql = (l - center[0]) / radius[0];
                const double qw = (w - center[1]) / radius[1];
                const double rho = std::sqrt(ql * ql + qw * qw);
                const double phase = std::fmod(dh + radius[2], rib_period);
                return std::abs(rho - 1.0) <= 0.06 * scale && phase < 0.5 * rib_period;
            }
        }
        return false;
    }
};

std::int64_t rasterize(const Placement& p, double scale, const Shape3& shape, const std::vector<std::uint8_t>& occ,
                       std::vector<std::uint8_t>* paint, std::uint8_t label) {
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < shape.l; ++i)
        for (std::int64_t j = 0; j < shape.w; ++j)
            for (std::int64_t k = 0; k < shape.h; ++k) {
                const auto idx = static_cast<std::size_t>(shape.index(i, j, k));
                if (occ[idx]) continue;
                if (!p.contains(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k), scale)) continue;
                ++count;
                if (paint) (*paint)[idx] = label;
            }
    return count;
}

}  // namespace

PhantomSpec default_phantom_spec(Shape3 shape) {
    PhantomSpec spec;
    spec.shape = shape;
    spec.primitives = {
        {"ribs", PrimitiveKind::lattice, 0.025, 0.035, {0.5, 0.5, 0.5}, {0.40, 0.32, 0.80}, 0.02, true},
        {"spine", PrimitiveKind::tube, 0.010, 0.014, {0.5, 0.80, 0.5}, {0.06, 0.06, 0.90}, 0.02, true},
        {"liver", PrimitiveKind::ellipsoid, 0.095, 0.115, {0.38, 0.45, 0.55}, {0.22, 0.18, 0.20}, 0.04, false},
        {"stomach", PrimitiveKind::ellipsoid, 0.035, 0.050, {0.65, 0.42, 0.62}, {0.12, 0.10, 0.12}, 0.04, false},
        {"kidney", PrimitiveKind::box, 0.012, 0.020, {0.64, 0.66, 0.38}, {0.06, 0.05, 0.09}, 0.03, false},
        {"aorta", PrimitiveKind::tube, 0.006, 0.010, {0.5, 0.63, 0.5}, {0.035, 0.035, 0.80}, 0.02, false},
    };
    return spec;
}

json to_json(const PhantomSpec& spec) {
    json prims = json::array();
    for (const auto& p : spec.primitives) {
        prims.push_back(json{
            {"name", p.name},
            {"kind", kind_name(p.kind)},
            {"fraction", {p.fraction_min, p.fraction_max}},
            {"center", p.center},
            {"extent", p.extent},
            {"jitter", p.jitter},
            {"protected", p.protect},
        });
    }
    return json{
        {"schema_version", 1},
        {"shape", {spec.shape.l, spec.shape.w, spec.shape.h}},
        {"spacing", spec.spacing},
        {"primitives", prims},
    };
}

PhantomSpec phantom_spec_from_json(const json& j) {
    PhantomSpec spec;
    try {
        const auto& s = j.at("shape");
        spec.shape = Shape3{s.at(0).get<std::int64_t>(), s.at(1).get<std::int64_t>(), s.at(2).get<std::int64_t>()};
        if (j.contains("spacing")) spec.spacing = j.at("spacing").get<Spacing>();
        for (const auto& p : j.at("primitives")) {
            PrimitiveSpec ps;
            ps.name = p.at("name").get<std::string>();
            ps.kind = kind_from_name(p.at("kind").get<std::string>());
            ps.fraction_min = p.at("fraction").at(0).get<double>();
            ps.fraction_max = p.at("fraction").at(1).get<double>();
            ps.center = p.at("center").get<std::array<double, 3>>();
            ps.extent = p.at("extent").get<std::array<double, 3>>();
            ps.jitter = p.value("jitter", 0.03);
            ps.protect = p.value("protected", false);
            spec.primitives.push_back(std::move(ps));
        }
    } catch (const json::exception& e) {
        throw InvalidSpecError(std::string("malformed phantom spec: ") + e.what());
    }
    return spec;
}

Phantom generate_phantom(const PhantomSpec& spec, Rng& rng) {
    if (!spec.shape.valid()) throw InvalidSpecError("phantom grid must be non-empty");
    if (spec.primitives.size() < 3) throw InvalidSpecError("phantom spec needs at least 3 primitives");
    if (spec.primitives.size() > 255) throw InvalidSpecError("phantom spec has more than 255 primitives");
    double max_sum = 0.0;
    bool has_lattice = false;
    for (const auto& p : spec.primitives) {
        if (!(p.fraction_min > 0.0 && p.fraction_min <= p.fraction_max))
            throw InvalidSpecError("primitive '" + p.name + "' needs 0 < fraction_min <= fraction_max");
        max_sum += p.fraction_max;
        has_lattice = has_lattice || (p.kind == PrimitiveKind::lattice && p.protect);
    }
    if (max_sum > 0.9) throw InvalidSpecError("primitive fractions sum to " + std::to_string(max_sum) + " > 0.9");
    if (!has_lattice) throw InvalidSpecError("phantom spec needs a protected lattice primitive");

    const Shape3& shape = spec.shape;
    const auto n = static_cast<std::size_t>(shape.voxels());
    std::vector<std::uint8_t> labels(n, 0);
    std::vector<std::uint8_t> occupied(n, 0);
    Phantom out{LabelVolume(shape, std::vector<std::uint8_t>(n, 0), spec.spacing), {}, {}};
    ClassTable table;

    // Protected skeleton first so soft tissue fills around it.
    std::vector<std::size_t> order(spec.primitives.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_partition(order.begin(), order.end(), [&](std::size_t i) { return spec.primitives[i].protect; });

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t pi : order) {
        const PrimitiveSpec& p = spec.primitives[pi];
        const auto label = static_cast<std::uint8_t>(pi + 1);
        table[label] = p.name;
        if (p.protect) out.protected_classes.insert(label);

        Placement place;
        place.kind = p.kind;
        for (int a = 0; a < 3; ++a) {
            const double dim = static_cast<double>(shape[a]);
            const double jitter = (2.0 * unit(rng) - 1.0) * p.jitter;
            place.center[a] = (p.center[a] + jitter) * dim - 0.5;
            const double aspect = p.kind == PrimitiveKind::lattice ? 1.0 : 1.0 + 0.1 * (2.0 * unit(rng) - 1.0);
            place.radius[a] = std::max(0.5, p.extent[a] * aspect * dim);
        }
        if (p.kind == PrimitiveKind::tube || p.kind == PrimitiveKind::lattice)
            place.radius[2] = 0.5 * p.extent[2] * static_cast<double>(shape.h);
        place.rib_period = std::max(4.0, static_cast<double>(shape.h) / 8.0);

        const double target_fraction = p.fraction_min + (p.fraction_max - p.fraction_min) * unit(rng);
        const auto target = static_cast<std::int64_t>(std::llround(target_fraction * static_cast<double>(n)));

        // Free-voxel count is monotone in scale; bisect for the target count.
        double lo = 0.0, hi = 1.0;
        while (rasterize(place, hi, shape, occupied, nullptr, label) < target && hi < 64.0) hi *= 2.0;
        for (int it = 0; it < 40; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (rasterize(place, mid, shape, occupied, nullptr, label) < target)
                lo = mid;
            else
                hi = mid;
        }
        const auto c_lo = rasterize(place, lo, shape, occupied, nullptr, label);
        const auto c_hi = rasterize(place, hi, shape, occupied, nullptr, label);
        const double scale = (target - c_lo) <= (c_hi - target) ? lo : hi;
        rasterize(place, scale, shape, occupied, &labels, label);
        for (std::size_t v = 0; v < n; ++v)
            if (labels[v] == label) occupied[v] = 1;
    }

    out.volume = LabelVolume(shape, std::move(labels), spec.spacing, std::move(table));
    const auto counts = out.volume.label_counts();
    for (std::size_t pi = 0; pi < spec.primitives.size(); ++pi)
        out.achieved_fractions[static_cast<int>(pi + 1)] =
            static_cast<double>(counts[pi + 1]) / static_cast<double>(n);
    return out;
}

std::vector<Subject> generate_phantoms(const PhantomSpec& spec, int count, std::uint64_t seed) {
    std::vector<Subject> out;
    out.reserve(static_cast<std::size_t>(std::max(count, 0)));
    for (int i = 0; i < count; ++i) {
        Rng rng = make_stream(seed, {stream::phantom, static_cast<std::uint64_t>(i)});
        char id[32];
        std::snprintf(id, sizeof id, "phantom_%03d", i);
        out.push_back(Subject{id, generate_phantom(spec, rng).volume});
    }
    return out;
}

std::set<int> protected_class_ids(const PhantomSpec& spec) {
    std::set<int> out;
    for (std::size_t i = 0; i < spec.primitives.size(); ++i)
        if (spec.primitives[i].protect) out.insert(static_cast<int>(i + 1));
    return out;
}

}  // namespace voxcomp
