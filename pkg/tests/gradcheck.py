"""Central finite-difference oracles for the network losses."""

import numpy as np

from trajpredict.nn import Discriminator, GaussianPolicy, Mlp, ValueNet

H = 1e-5


def numeric_grad(f, theta, h=H):
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def rel_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def small_net(rng, n_in=None, n_out=None):
    n_in = n_in or int(rng.integers(1, 6))
    hidden = [int(h) for h in rng.integers(1, 9, size=rng.integers(0, 3))]
    n_out = n_out or int(rng.integers(1, 4))
    return Mlp([n_in, *hidden, n_out], rng=rng)


def check_mlp(rng) -> float:
    net = small_net(rng)
    x = rng.normal(size=(int(rng.integers(1, 7)), net.sizes[0]))
    w = rng.normal(size=(len(x), net.sizes[-1]))
    theta = net.get_flat()

    def loss(t):
        m = net.copy()
        m.set_flat(t)
        return float(np.sum(w * np.tanh(m.forward(x))))

    grads, _ = net.backward(x, w * (1 - np.tanh(net.forward(x)) ** 2))
    return rel_error(Mlp.flatten_grads(grads), numeric_grad(loss, theta))


def check_mlp_input(rng) -> float:
    net = small_net(rng)
    x = rng.normal(size=(3, net.sizes[0]))
    w = rng.normal(size=(3, net.sizes[-1]))
    _, gx = net.backward(x, w)
    num = numeric_grad(lambda v: float(np.sum(w * net.forward(v.reshape(x.shape)))), x.ravel()).reshape(x.shape)
    return rel_error(gx, num)


def check_policy(rng) -> float:
    d_a = int(rng.integers(1, 4))
    net = small_net(rng, n_out=d_a)
    p = GaussianPolicy(net, None, None, rng.normal(0, 0.5, d_a))
    x = rng.normal(size=(int(rng.integers(1, 7)), net.sizes[0]))
    a = rng.normal(size=(len(x), d_a))
    w = rng.normal(size=len(x))

    def f(t):
        q = p.copy()
        q.mean_net.set_flat(t)
        return float(np.sum(w * q.logprob(x, a)))

    return rel_error(p.grad_logprob(x, a, w), numeric_grad(f, net.get_flat()))


def check_discriminator(rng) -> float:
    net = small_net(rng, n_out=1)
    d = Discriminator(net)
    x = rng.normal(size=(int(rng.integers(2, 9)), net.sizes[0]))
    labels = rng.integers(0, 2, len(x))

    def f(t):
        m = net.copy()
        m.set_flat(t)
        return Discriminator(m).loss_and_grad(x, labels)[0]

    return rel_error(d.loss_and_grad(x, labels)[1], numeric_grad(f, net.get_flat()))


def check_value(rng) -> float:
    net = small_net(rng, n_out=1)
    v = ValueNet(net)
    x = rng.normal(size=(int(rng.integers(1, 9)), net.sizes[0]))
    y = rng.normal(size=len(x))

    def f(t):
        m = net.copy()
        m.set_flat(t)
        return ValueNet(m).loss_and_grad(x, y)[0]

    return rel_error(v.loss_and_grad(x, y)[1], numeric_grad(f, net.get_flat()))


def check_jvp(rng) -> float:
    net = small_net(rng)
    x = rng.normal(size=(4, net.sizes[0]))
    d = rng.normal(size=net.n_params)
    theta = net.get_flat()

    def out(t):
        m = net.copy()
        m.set_flat(t)
        return m.forward(x)

    num = (out(theta + H * d) - out(theta - H * d)) / (2 * H)
    return rel_error(net.jvp(x, d), num)


CHECKS = {"mlp": check_mlp, "mlp_input": check_mlp_input, "policy_logprob": check_policy,
          "discriminator_bce": check_discriminator, "value_mse": check_value, "jvp": check_jvp}
