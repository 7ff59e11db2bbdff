#include "mvd/nn.hpp"

namespace mvd {

template <typename T>
std::vector<T> sincos_features(double pos, int dim, double max_period) {
    if (dim % 2 != 0) throw std::invalid_argument("sincos_features: dim must be even");
    std::vector<T> out(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq =
            half > 1 ? std::exp(-std::log(max_period) * double(i) / double(half - 1)) : 1.0;
        out[i] = T(std::sin(pos * freq));
        out[half + i] = T(std::cos(pos * freq));
    }
    return out;
}

template std::vector<float> sincos_features<float>(double, int, double);
template std::vector<double> sincos_features<double>(double, int, double);

}  // namespace mvd
