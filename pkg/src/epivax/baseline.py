"""Case-study constants for Victoria, Oct-Dec 2021."""

from .costmodel import CostParams
from .epimodel import CompartmentState, EpidemicParams, HospitalizationLink, NoiseIntensities

TRAIN_START = CompartmentState(
    S=0.554181, V=0.429185, E=0.010225, I1=0.001827, I2=0.000075, I3=0.000014, R=0.004361, D=0.000132
)
TEST_START = CompartmentState(
    S=0.191591, V=0.779949, E=0.009535, I1=0.001896, I2=0.000044, I3=0.000006, R=0.016773, D=0.000206
)

HOSP_LINK = HospitalizationLink(intercept=0.0060, slope=-0.1341)

PARAMS = EpidemicParams(
    Lambda=0.000053,
    zeta=0.000033,
    beta1=0.28120,
    beta2=0.15838,
    beta3=0.03880,
    sigma_vacc=0.06352,
    gamma=0.30954,
    delta1=0.28505,
    delta2=0.28269,
    delta3=0.14206,
    p2=0.14310,
    mu=0.00420,
    hosp_link=HOSP_LINK,
)

NOISE = NoiseIntensities((0.09275, 0.03887, 0.07517, 0.06302, 0.07878, 0.06123, 0.06110, 0.06199))

COSTS = CostParams(c1=100.0, c2=20.0, c3=50.0, c4=200.0, c5=1000.0, c6=100.0, psi=0.5)

TRAIN_DATES = ("2021-10-04", "2021-12-02")
TEST_END = "2021-12-23"
HORIZON_DAYS = 60

# Reported expected totals per strategy (policy, healthcare, economic, total).
REPORTED_TOTALS = {
    "zero": (2.11, 10.95, 34.89, 47.89),
    "constant": (3.33, 8.61, 27.09, 39.03),
    "actual": (3.60, 5.67, 27.26, 36.53),
    "optimal": (3.99, 5.08, 25.20, 34.27),
}
