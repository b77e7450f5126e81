#pragma once

namespace fbn {

// Small set of distribution functions backing the statistics code. All pure
// double precision, accurate to ~1e-12 over the ranges used here.

double normal_cdf(double x);
double normal_two_sided_p(double z);   // P(|Z| >= |z|)
double normal_quantile(double p);      // inverse CDF, p in (0,1)

// Regularized incomplete beta I_x(a,b) via the Lentz continued fraction.
double betainc(double a, double b, double x);

double student_t_two_sided_p(double t, double df);  // P(|T_df| >= |t|)
double student_t_quantile(double p, double df);     // inverse CDF by bisection
double f_survival(double f, double d1, double d2);  // P(F_{d1,d2} > f)

}  // namespace fbn
