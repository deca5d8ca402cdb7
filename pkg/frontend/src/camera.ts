/**
 * Orbit camera: spherical coordinates around a look-at target, converted to
 * the server's pose convention (camera-to-world, x right, y down, z forward,
 * world z up), serialized as 16 row-major values.
 */

export interface OrbitState {
  target: [number, number, number];
  radius: number;
  azimuth: number;   // radians around world z
  elevation: number; // radians above the horizontal plane
}

export const ORBIT_LIMITS = {
  minRadius: 0.05,
  maxElevation: 1.45, // keep away from the up-vector singularity
  minElevation: -1.45,
};

function cross(a: number[], b: number[]): number[] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(v: number[]): number[] {
  const n = Math.hypot(v[0], v[1], v[2]);
  if (n < 1e-12) throw new Error("cannot normalize zero vector");
  return [v[0] / n, v[1] / n, v[2] / n];
}

export function cameraPosition(orbit: OrbitState): [number, number, number] {
  const { target, radius, azimuth, elevation } = orbit;
  const ce = Math.cos(elevation);
  return [
    target[0] + radius * ce * Math.cos(azimuth),
    target[1] + radius * ce * Math.sin(azimuth),
    target[2] + radius * Math.sin(elevation),
  ];
}

/** Row-major 4x4 camera-to-world pose looking from the orbit position at the target. */
export function orbitPose(orbit: OrbitState): number[] {
  const position = cameraPosition(orbit);
  const forward = normalize([
    orbit.target[0] - position[0],
    orbit.target[1] - position[1],
    orbit.target[2] - position[2],
  ]);
  const right = normalize(cross(forward, [0, 0, 1]));
  const down = cross(forward, right);
  return [
    right[0], down[0], forward[0], position[0],
    right[1], down[1], forward[1], position[1],
    right[2], down[2], forward[2], position[2],
    0, 0, 0, 1,
  ];
}

export function poseToQueryParam(pose: number[]): string {
  return pose.map((v) => v.toPrecision(10)).join(",");
}

/** Apply a drag/zoom delta, clamping to the safe orbit range. */
export function applyOrbitDelta(
  orbit: OrbitState,
  dAzimuth: number,
  dElevation: number,
  zoomFactor = 1.0,
): OrbitState {
  const elevation = Math.min(
    ORBIT_LIMITS.maxElevation,
    Math.max(ORBIT_LIMITS.minElevation, orbit.elevation + dElevation),
  );
  const radius = Math.max(ORBIT_LIMITS.minRadius, orbit.radius * zoomFactor);
  let azimuth = orbit.azimuth + dAzimuth;
  // keep azimuth in (-pi, pi] so URL round-trips stay tidy
  azimuth = Math.atan2(Math.sin(azimuth), Math.cos(azimuth));
  return { ...orbit, azimuth, elevation, radius };
}

/** Parse a raw 16-value pose text field (covers viewpoints off the orbit). */
export function parseRawPose(text: string): number[] | null {
  const values = text
    .split(/[\s,]+/)
    .filter((s) => s.length > 0)
    .map(Number);
  if (values.length !== 16 || values.some((v) => !Number.isFinite(v))) {
    return null;
  }
  return values;
}
