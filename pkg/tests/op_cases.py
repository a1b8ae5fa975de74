"""Enumeration of every differentiable op for the gradient-check harness.

Each case builds fresh inputs (seeded) and a callable; both the unit tests
and the acceptance suite run the same list. Inputs are kept tiny so central
differences over every element stay fast, and are nudged away from
non-smooth points (ReLU kinks, bilinear lattice crossings, max ties).
"""

import numpy as np

from synthdetect import tensor as T


def _rt(rng, shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def case_add(rng):
    return T.add, [_rt(rng, (2, 3)), _rt(rng, (3,))]


def case_sub(rng):
    return T.sub, [_rt(rng, (2, 3)), _rt(rng, (2, 1))]


def case_mul(rng):
    return T.mul, [_rt(rng, (2, 3)), _rt(rng, (2, 3))]


def case_scale(rng):
    return lambda a: T.scale(a, -2.5), [_rt(rng, (2, 3))]


def case_matmul(rng):
    return T.matmul, [_rt(rng, (3, 4)), _rt(rng, (4, 2))]


def case_matmul_vec(rng):
    return T.matmul, [_rt(rng, (4,)), _rt(rng, (4, 3))]


def case_matvec(rng):
    return T.matmul, [_rt(rng, (3, 4)), _rt(rng, (4,))]


def case_relu(rng):
    x = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    return T.relu, [T.Tensor(x, requires_grad=True)]


def case_sigmoid(rng):
    return T.sigmoid, [_rt(rng, (3, 4), -3, 3)]


def case_logsigmoid(rng):
    return T.logsigmoid, [_rt(rng, (3, 4), -3, 3)]


def case_power(rng):
    return lambda a: T.power(a, 1.7), [_rt(rng, (3, 3), 0.2, 2.0)]


def case_softmax(rng):
    return lambda a: T.softmax(a, axis=-1), [_rt(rng, (2, 5), -2, 2)]


def case_sum(rng):
    return lambda a: T.tsum(a, axis=1, keepdims=True), [_rt(rng, (3, 4))]


def case_mean(rng):
    return lambda a: T.tmean(a, axis=(0, 2)), [_rt(rng, (2, 3, 4))]


def case_reshape(rng):
    return lambda a: T.reshape(a, (4, 3)), [_rt(rng, (3, 4))]


def case_transpose(rng):
    return lambda a: T.transpose(a, (1, 0, 2)), [_rt(rng, (2, 3, 2))]


def case_concat(rng):
    return (lambda a, b: T.concat([a, b], axis=1),
            [_rt(rng, (2, 2)), _rt(rng, (2, 3))])


def case_narrow(rng):
    return lambda a: T.narrow(a, 1, 1, 2), [_rt(rng, (3, 4))]


def case_broadcast(rng):
    return lambda a: T.broadcast_to(a, (3, 2, 4)), [_rt(rng, (2, 4))]


def case_channel_max(rng):
    x = rng.permutation(24).reshape(2, 3, 2, 2) * 0.37
    return T.channel_max, [T.Tensor(x, requires_grad=True)]


def case_conv2d_int(rng):
    return (lambda x, w, b: T.conv2d(x, w, b, stride=1, dilation=1),
            [_rt(rng, (1, 2, 5, 5)), _rt(rng, (2, 2, 3, 3)), _rt(rng, (2,))])


def case_conv2d_int_stride(rng):
    return (lambda x, w: T.conv2d(x, w, stride=2, dilation=2),
            [_rt(rng, (1, 2, 6, 6)), _rt(rng, (1, 2, 3, 3))])


def case_conv2d_frac(rng):
    return (lambda x, w: T.conv2d(x, w, stride=1, dilation=1.37),
            [_rt(rng, (1, 2, 5, 5)), _rt(rng, (2, 2, 3, 3))])


def case_conv2d_dilation_map(rng):
    dil = T.Tensor(rng.uniform(1.2, 1.7, (1, 1, 5, 5)), requires_grad=True)
    return (lambda x, w, d: T.conv2d(x, w, stride=1, dilation=d),
            [_rt(rng, (1, 1, 5, 5)), _rt(rng, (1, 1, 3, 3)), dil])


def case_modulated_frac_conv(rng):
    lam = T.Tensor(rng.uniform(0.1, 1.9, (1, 1, 4, 4)), requires_grad=True)
    dil = T.Tensor(rng.uniform(1.2, 1.7, (1, 1, 4, 4)), requires_grad=True)
    return (T.modulated_frac_conv2d,
            [_rt(rng, (1, 2, 4, 4)), _rt(rng, (2, 2, 3, 3)),
             _rt(rng, (2, 2, 3, 3)), lam, dil])


def case_depthwise_conv2d(rng):
    return (lambda x, w, b: T.depthwise_conv2d(x, w, b),
            [_rt(rng, (2, 3, 4, 4)), _rt(rng, (3, 3, 3)), _rt(rng, (3,))])


def case_batchnorm_train(rng):
    fn = lambda x, g, b: T.batchnorm_train(x, g, b)[0]
    return fn, [_rt(rng, (2, 2, 3, 3)), _rt(rng, (2,), 0.5, 1.5),
                _rt(rng, (2,))]


def case_batchnorm_inference(rng):
    mean = rng.uniform(-0.5, 0.5, 2)
    var = rng.uniform(0.5, 1.5, 2)
    fn = lambda x, g, b: T.batchnorm_inference(x, g, b, mean, var)
    return fn, [_rt(rng, (2, 2, 3, 3)), _rt(rng, (2,), 0.5, 1.5),
                _rt(rng, (2,))]


def case_dropout(rng):
    return (lambda x: T.dropout(x, 0.3, seed=7, training=True),
            [_rt(rng, (4, 5))])


def case_attention_stack(rng):
    q = _rt(rng, (4,))
    k = _rt(rng, (3, 4))
    v = _rt(rng, (3, 2))

    def fn(q, k, v):
        scores = T.scale(T.matmul(k, q), 1.0 / np.sqrt(4.0))
        return T.matmul(T.softmax(scores, axis=0), v)

    return fn, [q, k, v]


def case_conv_sum(rng):
    def fn(x, w):
        return T.tsum(T.conv2d(x, w))

    return fn, [_rt(rng, (1, 2, 4, 4)), _rt(rng, (2, 2, 3, 3))]


ALL_CASES = [
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("scale", case_scale),
    ("matmul", case_matmul),
    ("matmul_vec", case_matmul_vec),
    ("matvec", case_matvec),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("logsigmoid", case_logsigmoid),
    ("power", case_power),
    ("softmax", case_softmax),
    ("sum", case_sum),
    ("mean", case_mean),
    ("reshape", case_reshape),
    ("transpose", case_transpose),
    ("concat", case_concat),
    ("narrow", case_narrow),
    ("broadcast", case_broadcast),
    ("channel_max", case_channel_max),
    ("conv2d_int", case_conv2d_int),
    ("conv2d_int_stride", case_conv2d_int_stride),
    ("conv2d_frac", case_conv2d_frac),
    ("conv2d_dilation_map", case_conv2d_dilation_map),
    ("modulated_frac_conv", case_modulated_frac_conv),
    ("depthwise_conv2d", case_depthwise_conv2d),
    ("batchnorm_train", case_batchnorm_train),
    ("batchnorm_inference", case_batchnorm_inference),
    ("dropout", case_dropout),
    ("attention_stack", case_attention_stack),
    ("conv_sum", case_conv_sum),
]
