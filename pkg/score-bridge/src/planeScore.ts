/**
 * Analytic Stein score of a Gaussian-blurred plane prior.
 *
 * s(x) = -((<n, x> - offset) / blur^2) * n  with a unit normal n.
 *
 * This is the protocol-conformance double: it matches the client side's
 * analytic plane model to the last bit (same operation order), so bridge
 * round trips can be verified without any ML weights.
 */

import type { Point, Scorer } from './protocol.js';

export interface PlaneSpec {
  normal: Point;
  offset: number;
  blur: number;
}

export function parsePlaneSpec(text: string): PlaneSpec {
  const parts = text.split(',').map(Number);
  if (parts.length !== 5 || parts.some((v) => !Number.isFinite(v))) {
    throw new Error(`--mock-plane expects nx,ny,nz,offset,blur, got ${JSON.stringify(text)}`);
  }
  const [nx, ny, nz, offset, blur] = parts;
  const norm = Math.sqrt(nx * nx + ny * ny + nz * nz);
  if (norm === 0) throw new Error('plane normal must be nonzero');
  if (!(blur > 0)) throw new Error('plane blur must be positive');
  return { normal: [nx / norm, ny / norm, nz / norm], offset, blur };
}

export function planeScorer(spec: PlaneSpec): Scorer {
  const [nx, ny, nz] = spec.normal;
  const blurSq = spec.blur * spec.blur;
  return (points: Point[]): Point[] =>
    points.map((p) => {
      const residual = p[0] * nx + p[1] * ny + p[2] * nz - spec.offset;
      const factor = -(residual / blurSq);
      return [factor * nx, factor * ny, factor * nz];
    });
}
