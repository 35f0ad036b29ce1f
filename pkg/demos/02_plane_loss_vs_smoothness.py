"""Why a plane loss instead of depth smoothness.

Depth smoothness penalises neighbouring depth differences, so it is only
happy with surfaces facing the camera. The smallest singular value of the
patch point cloud is zero for any plane. Below, both losses are evaluated
on a patch of road seen at a grazing angle, then the plane loss alone is
used to flatten a noisy patch.

    python3 demos/02_plane_loss_vs_smoothness.py
"""
import numpy as np

from planereg.losses import depth_smoothness_loss, svd_plane_loss
from planereg.renderer import Camera, rays_for_patch

# Camera 1.5 m above the ground looking 10 degrees below the horizon.
pitch = np.radians(10)
fwd = np.array([0.0, np.cos(pitch), -np.sin(pitch)])
right = np.array([1.0, 0.0, 0.0])
rot = np.stack([right, np.cross(fwd, right), fwd], axis=1)
cam = Camera(100.0, 100.0, 80.0, 60.0, 160, 120, rot, [0.0, 0.0, 1.5])
rays = rays_for_patch(cam, (90, 70), 20)


def depth_to(normal, point):
    normal = np.asarray(normal, float)
    return ((np.asarray(point) - rays.origins) @ normal) / (rays.dirs @ normal)


print(f"{'surface':<16}{'plane loss':>12}{'smoothness':>12}")
for name, normal, point in [
    ("road", [0, 0, 1.0], [0, 0, 0]),
    ("facing wall", fwd, [0, 8.0, 0]),
    ("5 deg grade", [0, -np.sin(np.radians(5)), np.cos(np.radians(5))], [0, 0, 0]),
]:
    t = depth_to(normal, point)
    z = (t * (rays.dirs @ fwd)).reshape(20, 20)  # depth along the optical axis
    print(f"{name:<16}{svd_plane_loss(t, rays)[0]:>12.2e}{depth_smoothness_loss(z)[0]:>12.2e}")

# Gradient descent on the plane loss pulls noisy road depths onto a plane.
# It lands near the true road but not on it: the loss only asks for some plane.
rng = np.random.default_rng(0)
road = depth_to([0, 0, 1.0], [0, 0, 0])
t = road * (1 + rng.normal(0, 0.02, road.shape))
print("\nstep  sigma3   rms to true road (m)")
for step in range(301):
    loss, grad = svd_plane_loss(t, rays)
    if step % 60 == 0:
        print(f"{step:>4}  {loss:.4f}  {np.sqrt(np.mean((t - road) ** 2)):.4f}")
    t -= 0.05 * 0.98 ** step * grad
fit_normal = np.linalg.svd(rays.points(t) - rays.points(t).mean(0))[2][-1]
print("recovered normal", np.round(fit_normal * np.sign(fit_normal[2]), 3))
