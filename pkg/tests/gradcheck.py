"""Random-graph builder and central finite-difference gradient oracle.

The builder draws small graphs (depth <= 4, widths <= 8) from the full
primitive set; the oracle perturbs every parameter entry by +/-h and
compares the analytic gradients against the centered difference.
"""

import numpy as np

from dfaclab import autodiff as ad

H = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def build_random_graph(rng):
    """A random scalar-valued graph over fresh parameters.

    Returns (params, rebuild) where rebuild() re-runs the forward pass on
    the current parameter values and returns the scalar root.
    """
    params = ad.ParameterSet()
    rows = int(rng.integers(2, 5))
    width = int(rng.integers(2, 9))
    x0 = params.add("x0", rng.uniform(-1.0, 1.0, size=(rows, width)))
    depth = int(rng.integers(2, 5))
    plan = []
    for i in range(depth):
        op = rng.choice(["matmul", "add", "mul", "relu", "cos", "abs",
                         "affine", "concat", "broadcast_mul"])
        if op == "matmul":
            new_width = int(rng.integers(2, 9))
            w = params.add(f"w{i}", rng.uniform(-1.0, 1.0, size=(width, new_width)))
            plan.append(("matmul", w))
            width = new_width
        elif op in ("add", "mul"):
            other = params.add(f"{op}{i}", rng.uniform(-1.0, 1.0, size=(rows, width)))
            plan.append((op, other))
        elif op == "affine":
            plan.append(("affine", (float(rng.uniform(0.5, 1.5)), float(rng.uniform(-0.5, 0.5)))))
        elif op == "concat":
            extra = params.add(f"c{i}", rng.uniform(-1.0, 1.0, size=(rows, 2)))
            plan.append(("concat", extra))
            width += 2
        elif op == "broadcast_mul":
            # leading-dimension batch broadcast of a per-column parameter
            vec = params.add(f"v{i}", rng.uniform(0.5, 1.5, size=width))
            plan.append(("broadcast_mul", vec))
        else:
            plan.append((op, None))
    reducer = rng.choice(["mean", "sum_of_squares"])

    def rebuild():
        h = x0
        for op, arg in plan:
            if op == "matmul":
                h = ad.matmul(h, arg)
            elif op == "add":
                h = ad.add(h, arg)
            elif op == "mul":
                h = ad.mul(h, arg)
            elif op == "relu":
                h = ad.relu(h)
            elif op == "cos":
                h = ad.cos(h)
            elif op == "abs":
                h = ad.absolute(h)
            elif op == "affine":
                h = ad.affine(h, *arg)
            elif op == "concat":
                h = ad.concat([h, arg], axis=1)
            elif op == "broadcast_mul":
                h = ad.mul(h, ad.broadcast_to(arg, h.value.shape))
        if reducer == "mean":
            return ad.reduce_mean(h)
        return ad.affine(ad.reduce_mean(ad.mul(h, h)), 0.5, 0.0)

    return params, rebuild


def max_gradient_error(params, rebuild) -> float:
    """Worst analytic-vs-numeric discrepancy over all parameter entries.

    Returns the largest |analytic - numeric| after dividing by
    max(ABS_FLOOR/REL_TOL, |analytic|, |numeric|), so a return value of
    REL_TOL marks the pass boundary.
    """
    root = rebuild()
    ad.backward(root)
    analytic = {name: node.grad.copy() for name, node in params.items()}
    params.zero_grads()
    worst = 0.0
    for name, node in params.items():
        flat = node.value.ravel()
        grads = analytic[name].ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + H
            up = float(rebuild().value)
            flat[j] = orig - H
            down = float(rebuild().value)
            flat[j] = orig
            numeric = (up - down) / (2.0 * H)
            scale = max(ABS_FLOOR / REL_TOL, abs(grads[j]), abs(numeric))
            worst = max(worst, abs(grads[j] - numeric) / scale)
    return worst
