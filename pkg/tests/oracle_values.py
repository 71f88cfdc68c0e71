"""Values produced by tests/oracles/compute.py, frozen.

Each constant comes from a computation that does not touch the package:
RK4 integration, 50-digit mpmath arithmetic, or a closed form.
"""

# RK4 (10^4 steps) of d(log alpha)/dt = -(beta0 + t (beta1 - beta0)) / 2
LOG_ALPHA_VP_T1 = -5.0249999999999995
LOG_ALPHA_LOW_BETA_T1 = -0.25050000000000006
LOG_ALPHA_VP_T05 = -1.26875
LOG_SNR_VP_T05 = -1.2275677344107874

# rho-warped grid (0.002, 1, 50, 7) at 1-based index 25, 50 digits
KARRAS_I25 = 0.0821694807452821563982705171654

C_SKIP_EPS = 0.998402555910543

# posterior mean of a 3-point dataset at t=0.3 under (0.1, 20), mpmath
POSTERIOR_DATA = [
    [0.0012301533574825742, 0.2987455375084699, -0.2741378553622176, -0.8905918387572742],
    [-0.45467078517172255, -0.9916465549964624, 0.060143602597438485, 1.3402152455545335],
    [-0.49220651855132963, -0.6204748998199404, 0.4898420501851982, 0.35688700816006075],
]
POSTERIOR_X = [0.10541424899789856, -0.9304680447082047, -0.02925182246327349, 0.6953031944582878]
POSTERIOR_MEAN = [-0.43810278836707056, -0.7696870112034171, 0.19547128397314553, 0.8312130213707692]

# sqrt(2) E[chi_3]
PAIR_DISTANCE_D3 = 2.2567583341910256

# N([0,0], diag(1,4)) vs N([1,0.5], diag(2,1))
FRECHET_DIAG = 2.4215728752538097
