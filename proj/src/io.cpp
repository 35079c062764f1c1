#include "dino4d/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace dino4d {

namespace {
std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw Error("cannot open for writing: " + path);
    }
    return f;
}
std::ifstream open_in(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw Error("cannot open for reading: " + path);
    }
    return f;
}
}  // namespace

void write_f32(const std::string& path, const std::vector<double>& values) {
    auto f = open_out(path);
    std::vector<float> buf(values.begin(), values.end());
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void write_f64(const std::string& path, const std::vector<double>& values) {
    auto f = open_out(path);
    f.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
}

void write_u8(const std::string& path, const std::vector<std::uint8_t>& values) {
    auto f = open_out(path);
    f.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size()));
}

std::vector<double> read_f32(const std::string& path, std::size_t expected) {
    auto f = open_in(path);
    std::vector<float> buf(expected);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(expected * sizeof(float)));
    if (static_cast<std::size_t>(f.gcount()) != expected * sizeof(float)) {
        throw Error("short read: " + path);
    }
    return std::vector<double>(buf.begin(), buf.end());
}

std::vector<double> read_f64(const std::string& path, std::size_t expected) {
    auto f = open_in(path);
    std::vector<double> buf(expected);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(expected * sizeof(double)));
    if (static_cast<std::size_t>(f.gcount()) != expected * sizeof(double)) {
        throw Error("short read: " + path);
    }
    return buf;
}

std::vector<std::uint8_t> read_u8(const std::string& path, std::size_t expected) {
    auto f = open_in(path);
    std::vector<std::uint8_t> buf(expected);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(expected));
    if (static_cast<std::size_t>(f.gcount()) != expected) {
        throw Error("short read: " + path);
    }
    return buf;
}

std::vector<double> flatten_points(const std::vector<Vec3>& pts) {
    std::vector<double> flat;
    flat.reserve(pts.size() * 3);
    for (const Vec3& p : pts) {
        flat.push_back(p.x());
        flat.push_back(p.y());
        flat.push_back(p.z());
    }
    return flat;
}

std::vector<Vec3> unflatten_points(const std::vector<double>& flat) {
    std::vector<Vec3> pts(flat.size() / 3);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        pts[i] = Vec3(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]);
    }
    return pts;
}

void export_ply(const Pointmap& pm, const std::string& path) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < pm.size(); ++i) {
        if (pm.valid[i]) {
            ++count;
        }
    }
    auto f = open_out(path);
    f << "ply\nformat ascii 1.0\n";
    f << "element vertex " << count << "\n";
    f << "property float x\nproperty float y\nproperty float z\n";
    f << "end_header\n";
    f.precision(9);
    for (std::size_t i = 0; i < pm.size(); ++i) {
        if (pm.valid[i]) {
            f << pm.points[i].x() << " " << pm.points[i].y() << " "
              << pm.points[i].z() << "\n";
        }
    }
}

void write_pgm(const Image& img, const std::string& path) {
    auto f = open_out(path);
    f << "P5\n" << img.width << " " << img.height << "\n255\n";
    for (double v : img.pixels) {
        const int q = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255);
        f.put(static_cast<char>(q));
    }
}

}  // namespace dino4d
