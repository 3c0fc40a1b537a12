# Parametrized convex function, symbolic_theta export
# (n = 2 variables, p = 1 parameters, d = 1 outputs).
#
# pcf(x, theta) returns a CVXPY expression that is convex in x. For a
# symbolic_theta export the weight blocks are computed from theta with NumPy
# on every call; rebuild the expression whenever theta changes.
import json

import cvxpy as cp
import numpy as np


def _block(values, rows, cols, shape):
    v = np.asarray(values, dtype=float)
    if shape == "vector":
        return v.reshape(rows)
    if shape == "diagonal":
        return np.diag(v)
    if shape == "upper_triangular":
        m = np.zeros((rows, cols))
        m[np.triu_indices(rows, 0, cols)] = v
        return m
    return v.reshape(rows, cols)


def _head(kind, value):
    if kind == "nonneg":
        return max(value, 0.0)
    if kind == "nonpos":
        return -max(value, 0.0)
    return value


def _psi(theta, spec):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    h = np.zeros(0)
    for layer in spec["layers"]:
        a = np.asarray(layer["a"], dtype=float).reshape(layer["outputs"], layer["inputs"])
        b = np.asarray(layer["b"], dtype=float).reshape(layer["outputs"], spec["theta_size"])
        pre = a @ h + b @ theta + np.asarray(layer["c"], dtype=float)
        if layer["activation"] == "relu":
            h = np.maximum(pre, 0.0)
        elif layer["activation"] == "softplus":
            h = np.logaddexp(0.0, pre)
        else:
            h = np.array([_head(k, v) for k, v in zip(spec["heads"], pre)])
    return h


def pcf(x, theta=None):
    n0 = x
    n1 = np.asarray(theta, dtype=float).reshape(1)
    n2 = _psi(n1, json.loads(r'''{"theta_size":1,"layers":[{"inputs":0,"outputs":2,"activation":"relu","a":[],"b":[0.0,0.3221088436188455],"c":[0.49272486499423007,0.43160468332443697]},{"inputs":2,"outputs":24,"activation":null,"a":[0.16749407507795255,-0.17539161384480992,-0.4357878862067939,-0.4912263063121663,-0.3156333189361608,0.008406950242174856,0.32849329935939453,0.49408411693850013,0.4272994540441407,0.15954918117467606,-0.18323956462596339,-0.439847879985835,-0.4895888645756587,-0.30906855611851736,0.016811523610568348,0.3347848810983005,0.4953036778474352,0.4228734155714671,0.151559178372852,-0.19103570859200292,-0.44378351679075145,-0.4878130027340788,-0.30241641120314205,0.02521134390340561,0.34098181003406647,0.49638320291795335,0.41832781926802803,0.14352632566386422,-0.19877784156071646,-0.4475936839098401,-0.48589922287193205,-0.2956787649325622,0.03360403626273746,0.347082334126121,0.4973223869389189,0.4136639502976903,0.13545289415393452,-0.20646377462027005,-0.4512773041050927,-0.48384806606690306,-0.2888575222228673,0.041987227845871646,0.35308472859016465,0.4981209643774318,0.4088831272632229,0.12734116642201754,-0.2140913347480755,-0.4548333359167626],"b":[-0.48166011223688043,-0.2819546116251342,0.050358548496250266,0.35898729638582205,0.49877870945390235,0.40398670183349256,0.11919343587444947,-0.2216583654251604,-0.4582607739578169,-0.4793359799759973,-0.2749719847801739,0.058715631413544335,0.3647883686964267,0.49929543620588523,0.39897605836131755,0.11101200609654119,-0.22916272724587977,-0.46155864919817846,-0.4768763263797359,-0.26791161586676043,0.06705611382282857,0.3704863054008574,0.49967099854065516,0.39385261349205897],"c":[0.10279919020130406,-0.23660229852278242,-0.46472602923870665,-0.4742818468591541,-0.2607755010434559,0.07537763764258104,0.37607949553723724,0.4999052902765126,0.3886178157631133,0.09455731017544924,-0.243974975886459,-0.4677620185748076,-0.47155327494426713,-0.25356565788426605,0.08367785015139996,0.3815663577583896,0.4999982451728033,0.3832731451943564,0.08628869622290906,-0.25127867488024364,-0.47066575884961254,-0.46869138207666317,-0.24628412480819564,0.09195440465317148]}],"heads":["nonneg","nonneg","nonneg","nonneg","nonneg","nonneg","identity","identity","identity","identity","identity","identity","identity","identity","identity","identity","identity","identity","identity","identity","identity","identity","identity","identity"]}'''))
    n3 = _block(n2[6:6 + 4], 2, 2, "dense")
    n4 = _block(n2[16:16 + 2], 2, 1, "vector")
    n5 = n3 @ n0 + n4
    n6 = cp.logistic(n5)
    n7 = _block(n2[10:10 + 4], 2, 2, "dense")
    n8 = _block(n2[18:18 + 2], 2, 1, "vector")
    n9 = n7 @ n0 + n8
    n10 = _block(n2[0:0 + 4], 2, 2, "dense")
    n11 = n10 @ n6
    n12 = n9 + n11
    n13 = cp.logistic(n12)
    n14 = _block(n2[14:14 + 2], 1, 2, "dense")
    n15 = _block(n2[20:20 + 1], 1, 1, "vector")
    n16 = n14 @ n0 + n15
    n17 = _block(n2[4:4 + 2], 1, 2, "dense")
    n18 = n17 @ n13
    n19 = _block(n2[21:21 + 3], 2, 2, "upper_triangular")
    n20 = _block([0.0, 0.0], 2, 1, "vector")
    n21 = n19 @ n0 + n20
    n22 = cp.sum_squares(n21)
    n23 = n16 + n18 + n22
    return n23
