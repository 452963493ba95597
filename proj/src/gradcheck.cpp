#include "dmd/gradcheck.hpp"

#include "dmd/dmd.hpp"

#include <algorithm>
#include <iomanip>

namespace dmd {

double relative_error(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: size mismatch");
  const double diff = (a - b).norm();
  const double scale = std::max(a.norm(), b.norm());
  return scale < 1e-12 ? diff : diff / scale;
}

VectorXd finite_difference_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x, double h) {
  VectorXd g(x.size());
  VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

namespace {

using Shape = std::pair<int, int>;
using Builder = std::function<NodeId(Tape<double>&, const std::vector<NodeId>&)>;

std::vector<MatrixXd> unpack(const VectorXd& x, const std::vector<Shape>& shapes) {
  std::vector<MatrixXd> out;
  Eigen::Index at = 0;
  for (auto [r, c] : shapes) {
    MatrixXd m(r, c);
    std::copy(x.data() + at, x.data() + at + r * c, m.data());
    at += r * c;
    out.push_back(std::move(m));
  }
  return out;
}

// Checks d/dinputs of sum(R * op(inputs)) for a random projection R.
double check_op(const std::vector<Shape>& shapes, const Builder& build, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::Index n = 0;
  for (auto [r, c] : shapes) n += Eigen::Index(r) * c;
  const VectorXd x0 = standard_normal<double>(n, 1, rng);

  Tape<double> probe;
  std::vector<NodeId> ids;
  for (auto& m : unpack(x0, shapes)) ids.push_back(probe.variable(m));
  const NodeId out0 = build(probe, ids);
  const MatrixXd R = standard_normal<double>(probe.value(out0).rows(), probe.value(out0).cols(), rng);

  auto f = [&](const VectorXd& x) {
    Tape<double> t;
    std::vector<NodeId> in;
    for (auto& m : unpack(x, shapes)) in.push_back(t.variable(m));
    return (R.array() * t.value(build(t, in)).array()).sum();
  };

  probe.backward(out0, R);
  VectorXd ad(n);
  Eigen::Index at = 0;
  for (NodeId id : ids) {
    MatrixXd g = probe.grad(id);
    std::copy(g.data(), g.data() + g.size(), ad.data() + at);
    at += g.size();
  }
  return relative_error(ad, finite_difference_gradient(f, x0));
}

double worst_over_seeds(const std::function<double(std::uint64_t)>& one, std::uint64_t seed, int repeats = 3) {
  double worst = 0;
  for (int k = 0; k < repeats; ++k) worst = std::max(worst, one(seed * 7919 + std::uint64_t(k)));
  return worst;
}

GradCheck op_check(std::string name, std::vector<Shape> shapes, Builder build) {
  return {std::move(name), [shapes, build](std::uint64_t seed) {
            return worst_over_seeds([&](std::uint64_t s) { return check_op(shapes, build, s); }, seed);
          }};
}

NoiseSchedule<double> small_schedule(ScheduleKind kind) { return NoiseSchedule<double>::build(kind, 50, 0.002, 80); }

Denoiser<double> random_denoiser(ScheduleKind kind, Prediction pred, int classes, Rng& rng) {
  Denoiser<double> d(small_schedule(kind), 2, {6, 5}, Activation::silu, pred, 0.5, classes);
  d.mutable_net().initialize(rng);
  d.mutable_net().parameters() += 0.1 * standard_normal<double>(d.net().parameters().size(), 1, rng);
  return d;
}

Generator<double> random_generator(Rng& rng, int classes = 0) {
  Mlp<double> net({2 + (classes > 0 ? classes + 1 : 0), 6, 5, 2}, Activation::silu);
  net.initialize(rng);
  net.parameters() += 0.1 * standard_normal<double>(net.parameters().size(), 1, rng);
  return Generator<double>(std::move(net), 0.3, 0.8, 2, classes);
}

double check_mlp(std::uint64_t seed, Activation act) {
  Rng rng(seed);
  Mlp<double> net({3, 5, 4, 2}, act);
  net.initialize(rng);
  const MatrixXd in = standard_normal<double>(4, 3, rng);
  const MatrixXd R = standard_normal<double>(4, 2, rng);
  Tape<double> tape;
  auto trace = mlp_forward(net, tape.variable(in), tape);
  tape.backward(trace.output, R);
  const VectorXd ad = parameter_gradient(net, tape, trace);
  auto f = [&](const VectorXd& p) {
    Mlp<double> copy = net;
    copy.set_parameters(p);
    return (R.array() * copy.forward(in).array()).sum();
  };
  return relative_error(ad, finite_difference_gradient(f, net.parameters()));
}

double check_denoising(std::uint64_t seed, ScheduleKind kind, Prediction pred, int classes) {
  Rng rng(seed);
  Denoiser<double> d = random_denoiser(kind, pred, classes, rng);
  const MatrixXd x0 = standard_normal<double>(5, 2, rng);
  const MatrixXd eps = standard_normal<double>(5, 2, rng);
  std::vector<int> bins, labels;
  std::uniform_int_distribution<int> pick(0, d.schedule().bins() - 1);
  for (int i = 0; i < 5; ++i) {
    bins.push_back(pick(rng));
    if (classes > 0) labels.push_back(i % (classes + 1));
  }
  const auto lg = denoising_loss_at(d, x0, bins, eps, labels);
  auto f = [&](const VectorXd& p) {
    Denoiser<double> copy = d;
    copy.mutable_net().set_parameters(p);
    return denoising_loss_at(copy, x0, bins, eps, labels).loss;
  };
  return relative_error(lg.grad, finite_difference_gradient(f, d.net().parameters()));
}

double check_regression(std::uint64_t seed, RegressionDistance distance) {
  Rng rng(seed);
  Generator<double> g = random_generator(rng);
  const MatrixXd z = standard_normal<double>(6, 2, rng);
  const MatrixXd y = standard_normal<double>(6, 2, rng);
  const MatrixXd features = random_feature_map<double>(2, 8, seed);
  const auto lg = regression_loss(g, z, y, distance, 0.25, {}, &features);
  auto f = [&](const VectorXd& p) {
    Generator<double> copy = g;
    copy.net().set_parameters(p);
    return regression_loss(copy, z, y, distance, 0.25, {}, &features).loss;
  };
  return relative_error(lg.grad, finite_difference_gradient(f, g.net().parameters()));
}

// The surrogate 0.5 ||G(z) - stopgrad(G(z) - g)||^2 differentiated with the
// target held fixed.
double check_dm_surrogate(std::uint64_t seed, Weighting mode) {
  Rng rng(seed);
  Denoiser<double> real = random_denoiser(ScheduleKind::vp, Prediction::mean, 0, rng);
  real.set_timestep_window(0.02, 0.98);
  Denoiser<double> fake = real.as_fake();
  fake.mutable_net().parameters() += 0.2 * standard_normal<double>(fake.net().parameters().size(), 1, rng);
  Generator<double> g = random_generator(rng);
  const MatrixXd z = standard_normal<double>(6, 2, rng);
  const auto dm = dm_gradient(g, real, fake, z, rng, mode);
  const MatrixXd target = dm.x - dm.sample_grad;
  auto f = [&](const VectorXd& p) {
    Generator<double> copy = g;
    copy.net().set_parameters(p);
    return 0.5 * (copy.forward(z) - target).squaredNorm();
  };
  return relative_error(dm.grad, finite_difference_gradient(f, g.net().parameters()));
}

// d x_t / d theta = alpha_t d G / d theta with the noise held fixed.
double check_diffuse_chain(std::uint64_t seed) {
  Rng rng(seed);
  Generator<double> g = random_generator(rng);
  const auto s = small_schedule(ScheduleKind::vp);
  const MatrixXd z = standard_normal<double>(4, 2, rng);
  const MatrixXd eps = standard_normal<double>(4, 2, rng);
  const MatrixXd v = standard_normal<double>(4, 2, rng);
  const int t = 17;
  Tape<double> tape;
  auto rec = g.record(tape, z);
  tape.backward(rec.x, v);
  const VectorXd ad = s.alpha(t) * parameter_gradient(g.net(), tape, rec.trace);
  auto f = [&](const VectorXd& p) {
    Generator<double> copy = g;
    copy.net().set_parameters(p);
    return (v.array() * diffuse<double>(s, copy.forward(z), t, eps).array()).sum();
  };
  return relative_error(ad, finite_difference_gradient(f, g.net().parameters()));
}

Builder custom_square(double backward_factor) {
  return [backward_factor](Tape<double>& t, const std::vector<NodeId>& in) {
    return t.custom(
        {in[0]}, [](const std::vector<const MatrixXd*>& x) { return MatrixXd(x[0]->array().square()); },
        [backward_factor](const MatrixXd& g, const std::vector<const MatrixXd*>& x, const MatrixXd&) {
          return std::vector<MatrixXd>{MatrixXd(backward_factor * g.array() * x[0]->array())};
        },
        "square");
  };
}

}  // namespace

std::vector<GradCheck> default_grad_checks() {
  std::vector<GradCheck> c;
  c.push_back(op_check("tape.add", {{3, 4}, {3, 4}}, [](auto& t, auto& in) { return t.add(in[0], in[1]); }));
  c.push_back(op_check("tape.sub", {{3, 4}, {3, 4}}, [](auto& t, auto& in) { return t.sub(in[0], in[1]); }));
  c.push_back(op_check("tape.mul", {{3, 4}, {3, 4}}, [](auto& t, auto& in) { return t.mul(in[0], in[1]); }));
  c.push_back(op_check("tape.scale", {{3, 4}}, [](auto& t, auto& in) { return t.scale(in[0], -1.7); }));
  c.push_back(op_check("tape.matmul", {{3, 5}, {5, 2}}, [](auto& t, auto& in) { return t.matmul(in[0], in[1]); }));
  c.push_back(op_check("tape.add_bias", {{4, 3}, {1, 3}}, [](auto& t, auto& in) { return t.add_bias(in[0], in[1]); }));
  c.push_back(op_check("tape.mul_rows", {{4, 3}, {4, 1}}, [](auto& t, auto& in) { return t.mul_rows(in[0], in[1]); }));
  c.push_back(op_check("tape.tanh", {{3, 4}}, [](auto& t, auto& in) { return t.activation(in[0], Activation::tanh); }));
  c.push_back(op_check("tape.silu", {{3, 4}}, [](auto& t, auto& in) { return t.activation(in[0], Activation::silu); }));
  c.push_back(
      op_check("tape.identity", {{3, 4}}, [](auto& t, auto& in) { return t.activation(in[0], Activation::identity); }));
  c.push_back(op_check("tape.sum", {{3, 4}}, [](auto& t, auto& in) { return t.sum(in[0]); }));
  c.push_back(op_check("tape.mean", {{3, 4}}, [](auto& t, auto& in) { return t.mean(in[0]); }));
  c.push_back(op_check("tape.mse", {{3, 4}, {3, 4}}, [](auto& t, auto& in) { return t.mse(in[0], in[1]); }));
  c.push_back(
      op_check("tape.concat_cols", {{3, 2}, {3, 4}}, [](auto& t, auto& in) { return t.concat_cols(in[0], in[1]); }));
  c.push_back(op_check("tape.custom", {{3, 4}}, custom_square(2.0)));
  c.push_back({"mlp.silu", [](std::uint64_t s) {
                 return worst_over_seeds([](std::uint64_t k) { return check_mlp(k, Activation::silu); }, s);
               }});
  c.push_back({"mlp.tanh", [](std::uint64_t s) {
                 return worst_over_seeds([](std::uint64_t k) { return check_mlp(k, Activation::tanh); }, s);
               }});
  for (auto kind : {ScheduleKind::vp, ScheduleKind::edm})
    for (auto pred : {Prediction::eps, Prediction::mean})
      c.push_back({std::string("denoising_loss.") + to_string(kind) + "." + to_string(pred),
                   [kind, pred](std::uint64_t s) {
                     return worst_over_seeds([&](std::uint64_t k) { return check_denoising(k, kind, pred, 0); }, s);
                   }});
  c.push_back({"denoising_loss.conditional", [](std::uint64_t s) {
                 return worst_over_seeds(
                     [](std::uint64_t k) { return check_denoising(k, ScheduleKind::vp, Prediction::mean, 2); }, s);
               }});
  c.push_back({"regression_loss.squared_l2", [](std::uint64_t s) {
                 return worst_over_seeds(
                     [](std::uint64_t k) { return check_regression(k, RegressionDistance::squared_l2); }, s);
               }});
  c.push_back({"regression_loss.random_feature", [](std::uint64_t s) {
                 return worst_over_seeds(
                     [](std::uint64_t k) { return check_regression(k, RegressionDistance::random_feature); }, s);
               }});
  c.push_back({"dm_surrogate.alg2-code", [](std::uint64_t s) {
                 return worst_over_seeds([](std::uint64_t k) { return check_dm_surrogate(k, Weighting::alg2_code); },
                                         s);
               }});
  c.push_back({"dm_surrogate.paper-eq8", [](std::uint64_t s) {
                 return worst_over_seeds([](std::uint64_t k) { return check_dm_surrogate(k, Weighting::paper_eq8); },
                                         s);
               }});
  c.push_back({"diffuse_chain_rule", [](std::uint64_t s) { return worst_over_seeds(check_diffuse_chain, s); }});
  return c;
}

GradCheck corrupted_backward_check() { return op_check("fixture.corrupted_square", {{3, 4}}, custom_square(3.0)); }

std::vector<GradCheckResult> run_grad_checks(const std::vector<GradCheck>& checks, std::uint64_t seed,
                                             double tolerance) {
  std::vector<GradCheckResult> out;
  for (const auto& c : checks) {
    const double err = c.run(seed);
    out.push_back({c.name, err, std::isfinite(err) && err <= tolerance});
  }
  return out;
}

void write_grad_check_csv(std::ostream& out, const std::vector<GradCheckResult>& results) {
  out << "name,max_rel_error,passed\n";
  for (const auto& r : results)
    out << r.name << ',' << std::setprecision(6) << std::scientific << r.max_rel_error << std::defaultfloat << ','
        << (r.passed ? "true" : "false") << '\n';
}

}  // namespace dmd
