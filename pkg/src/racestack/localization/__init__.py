from .association import Association, icnn_associate, jcbb_associate, JointCompatibility
from .ekf import (
    CovarianceError,
    EkfState,
    OdometryInput,
    VehicleParams,
    correct,
    nees,
    observation_jacobians,
    observe,
    predict,
)
from .mapping import Candidate, Landmark, LandmarkMap, update_map
