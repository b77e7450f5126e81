#include "fbn/special.hpp"

#include <cmath>

#include "fbn/errors.hpp"

namespace fbn {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0))
        raise(ErrorCode::ConfigError, "normal_quantile needs p in (0,1)");

    // Acklam's rational approximation, then one Halley step to push the
    // relative error from ~1e-9 down to machine precision.
    static const double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                -2.759285104469687e+02, 1.383577518672690e+02,
                                -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                -1.556989798598866e+02, 6.680131188771972e+01,
                                -1.328068155288572e+01};
    static const double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                -2.400758277161838e+00, -2.549732539343734e+00,
                                4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;

    double x;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }

    const double e = normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
    return x - u / (1.0 + x * u / 2.0);
}

namespace {

double betacf(double a, double b, double x) {
    const int kMaxIter = 400;
    const double eps = 3e-16, fpmin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double dd = 1.0 - qab * x / qap;
    if (std::abs(dd) < fpmin) dd = fpmin;
    dd = 1.0 / dd;
    double h = dd;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        dd = 1.0 + aa * dd;
        if (std::abs(dd) < fpmin) dd = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        dd = 1.0 / dd;
        h *= dd * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        dd = 1.0 + aa * dd;
        if (std::abs(dd) < fpmin) dd = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        dd = 1.0 / dd;
        const double del = dd * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

}  // namespace

double betainc(double a, double b, double x) {
    if (a <= 0.0 || b <= 0.0) raise(ErrorCode::ConfigError, "betainc needs a,b > 0");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                         a * std::log(x) + b * std::log1p(-x);
    const double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
    if (df <= 0.0) raise(ErrorCode::ConfigError, "t distribution needs df > 0");
    if (!std::isfinite(t)) return 0.0;
    return betainc(df / 2.0, 0.5, df / (df + t * t));
}

double student_t_quantile(double p, double df) {
    if (!(p > 0.0 && p < 1.0))
        raise(ErrorCode::ConfigError, "student_t_quantile needs p in (0,1)");
    if (p == 0.5) return 0.0;
    const bool lower = p < 0.5;
    const double tail = lower ? p : 1.0 - p;  // one-sided upper tail mass
    // cdf(t) for t >= 0 is 1 - two_sided(t)/2; bisect on the upper tail.
    double lo = 0.0, hi = 1.0;
    while (student_t_two_sided_p(hi, df) / 2.0 > tail) hi *= 2.0;
    for (int i = 0; i < 200 && hi - lo > 1e-14 * (1.0 + hi); ++i) {
        const double mid = 0.5 * (lo + hi);
        if (student_t_two_sided_p(mid, df) / 2.0 > tail)
            lo = mid;
        else
            hi = mid;
    }
    const double q = 0.5 * (lo + hi);
    return lower ? -q : q;
}

double f_survival(double f, double d1, double d2) {
    if (d1 <= 0.0 || d2 <= 0.0) raise(ErrorCode::ConfigError, "F distribution needs df > 0");
    if (!std::isfinite(f)) return 0.0;
    if (f <= 0.0) return 1.0;
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

}  // namespace fbn
