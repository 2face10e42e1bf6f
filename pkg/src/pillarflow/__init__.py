"""BeV motion estimation from consecutive LIDAR sweeps with a pillar-feature flow network,
classical baselines and a cluster tracker that takes flow as a velocity prior."""

__version__ = "0.1.0"
