// Library walk-through: simulate one undersampled slice, then compare the
// zero-filled image, the l1 reference and an untrained unrolled network.
//
//   equirecon_example [seed]

#include <iostream>

#include <equirecon/harness.hpp>

using namespace equirecon;

int main(int argc, char** argv) {
    const std::uint64_t seed = argc > 1 ? std::stoull(argv[1]) : 1;

    DataConfig data;
    data.height = data.width = 64;
    data.coils = 4;
    data.acceleration = 4.0;
    data.seed = seed;
    const auto s = generate_slice(data, 0, 0);
    std::cout << "slice " << s.id << ": " << s.height() << "x" << s.width() << ", " << s.maps.ncoils() << " coils, acceleration "
              << EvalReport::fmt(s.mask.acceleration) << "\n";

    auto report = [&](const char* name, const ComplexTensor<double>& x) {
        std::cout << name << ": ssim " << EvalReport::fmt(ssim_magnitude(x, s.target)) << ", cpsnr "
                  << EvalReport::fmt(cpsnr_db(x, s.target)) << " dB\n";
    };
    report("zero-filled", zero_filled_init(s));
    report("l1 reference", pgd_l1_reference(s, 1e-3, 100, 0.5).recon.image);

    ModelSpec spec;
    spec.variant = Variant::scale_eq;
    spec.unrolls = 5;
    spec.channels = 16;
    const auto model = init_model<double>(spec, mix_seed(seed, 2));
    std::cout << "scale_eq model with " << parameter_count(spec) << " parameters\n";
    report("untrained unrolled", unrolled_forward(s, model).image);

    // Scale the acquisition by 0.9 and compare the network's response with
    // the rescaled original response.
    const auto scaled = scale_sample(s, 0.9);
    const auto a = resample_scale(unrolled_forward(s, model).image, 0.9);
    const auto b = unrolled_forward(scaled, model).image;
    std::cout << "network delta at s = 0.9: "
              << EvalReport::fmt(interior_relative_error(pack_planar(a), pack_planar(b), equivariance_margin(0.9, 64, 64, 5))) << "\n";
    return 0;
}
