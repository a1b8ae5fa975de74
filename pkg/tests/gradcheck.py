"""Central finite-difference gradient checking used across the suite."""

import numpy as np

from synthdetect import tensor as T


def fd_gradcheck(fn, tensors, h=1e-5, rtol=1e-4, atol=1e-7):
    """Check autodiff gradients of fn(*tensors) against central differences.

    ``fn`` returns a Tensor of any shape; it is contracted to a scalar with
    fixed random weights so the full Jacobian action is probed. Raises
    AssertionError with the worst offender on mismatch.
    """
    out = fn(*tensors)
    rw = np.random.default_rng(1234).standard_normal(out.shape)
    for t in tensors:
        t.grad = None
    loss = T.tsum(T.mul(out, T.Tensor(rw)))
    T.backward(loss)

    def loss_value():
        with T.no_grad():
            return float((fn(*tensors).data * rw).sum())

    for ti, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        assert t.grad is not None, f"input {ti} got no gradient"
        fd = np.zeros_like(t.data)
        flat = t.data.ravel()
        fdflat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            fdflat[i] = (fp - fm) / (2.0 * h)
        err = np.abs(t.grad - fd)
        lim = atol + rtol * np.maximum(np.abs(t.grad), np.abs(fd))
        if not np.all(err <= lim):
            j = int(np.argmax(err - lim))
            raise AssertionError(
                f"gradient mismatch on input {ti} at flat index {j}: "
                f"autodiff={t.grad.ravel()[j]:.10g} fd={fdflat[j]:.10g}")
    return True
