/**
 * Pretrained point-cloud score models behind the bridge protocol.
 *
 * The network sees clouds in its training normalization; the bridge owns
 * that mapping.  With y = (x - center) / scale, the chain rule gives
 * score_x = score_y / scale, so scores are divided by the same factor on
 * the way out.  'sphere' normalization (centroid + max radius) is the
 * usual convention for point-cloud denoisers and makes scores of a
 * uniformly scaled cloud shrink by exactly the scale factor.
 */

import type { Point, Scorer } from './protocol.js';

export type Normalization = 'sphere' | 'none' | { fixedScale: number };

export function parseNormalization(text: string): Normalization {
  if (text === 'sphere' || text === 'none') return text;
  if (text.startsWith('fixed:')) {
    const value = Number(text.slice('fixed:'.length));
    if (!(value > 0)) throw new Error(`fixed scale must be positive, got ${text}`);
    return { fixedScale: value };
  }
  throw new Error(`--normalize expects sphere, none or fixed:<scale>, got ${text}`);
}

function centroidOf(points: Point[]): Point {
  const c: Point = [0, 0, 0];
  for (const p of points) {
    c[0] += p[0];
    c[1] += p[1];
    c[2] += p[2];
  }
  const n = points.length;
  return [c[0] / n, c[1] / n, c[2] / n];
}

/** Wrap a raw scorer so it sees normalized clouds and returns raw-frame scores. */
export function normalizedScorer(raw: Scorer, normalization: Normalization): Scorer {
  return async (points: Point[]): Promise<Point[]> => {
    if (points.length === 0) return [];
    let center: Point = [0, 0, 0];
    let scale = 1;
    if (normalization !== 'none') {
      center = centroidOf(points);
      if (normalization === 'sphere') {
        let radius = 0;
        for (const p of points) {
          const dx = p[0] - center[0];
          const dy = p[1] - center[1];
          const dz = p[2] - center[2];
          radius = Math.max(radius, Math.sqrt(dx * dx + dy * dy + dz * dz));
        }
        scale = radius > 0 ? radius : 1;
      } else {
        scale = normalization.fixedScale;
      }
    }
    const mapped = points.map(
      (p): Point => [(p[0] - center[0]) / scale, (p[1] - center[1]) / scale, (p[2] - center[2]) / scale],
    );
    const scores = await raw(mapped);
    return scores.map((s): Point => [s[0] / scale, s[1] / scale, s[2] / scale]);
  };
}

/** Load a converted tfjs score network from disk; (1, P, 3) in and out. */
export async function tfjsScorer(modelPath: string): Promise<Scorer> {
  const tf = await import('@tensorflow/tfjs');
  const url = modelPath.startsWith('file://') ? modelPath : `file://${modelPath}`;
  let model: { predict(input: unknown): unknown };
  try {
    model = await tf.loadGraphModel(url);
  } catch {
    model = await tf.loadLayersModel(url);
  }
  return async (points: Point[]): Promise<Point[]> => {
    if (points.length === 0) return [];
    const input = tf.tensor3d([points as number[][]], [1, points.length, 3]);
    try {
      const output = model.predict(input) as { array(): Promise<number[][][]> ; dispose(): void };
      const values = await output.array();
      output.dispose();
      return values[0] as Point[];
    } finally {
      input.dispose();
    }
  };
}
