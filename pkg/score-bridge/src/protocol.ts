/**
 * Line-delimited JSON protocol over stdio.
 *
 * Request:  {"id": number, "points": [[x, y, z], ...]}
 * Response: {"id": number, "scores": [[sx, sy, sz], ...]}
 * Errors:   {"id": number | null, "error": "..."} — the loop keeps running.
 *
 * One response per request, in request order.  Anything diagnostic goes to
 * stderr; stdout carries protocol lines only.
 */

import { createInterface } from 'node:readline';

export type Point = [number, number, number];

/** Pure scorer: P points in, P 3-vector scores out. */
export type Scorer = (points: Point[]) => Point[] | Promise<Point[]>;

interface ParsedRequest {
  id: number;
  points: Point[];
}

function parseRequest(line: string): ParsedRequest {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    throw new ProtocolError(null, 'malformed JSON request line');
  }
  if (typeof raw !== 'object' || raw === null) {
    throw new ProtocolError(null, 'request must be a JSON object');
  }
  const obj = raw as { id?: unknown; points?: unknown };
  const id = typeof obj.id === 'number' ? obj.id : null;
  if (id === null) {
    throw new ProtocolError(null, 'request is missing a numeric id');
  }
  if (!Array.isArray(obj.points)) {
    throw new ProtocolError(id, 'request is missing a points array');
  }
  for (const p of obj.points) {
    if (!Array.isArray(p) || p.length !== 3 || p.some((v) => typeof v !== 'number' || !Number.isFinite(v))) {
      throw new ProtocolError(id, 'points must be finite [x, y, z] triples');
    }
  }
  return { id, points: obj.points as Point[] };
}

export class ProtocolError extends Error {
  constructor(public readonly id: number | null, message: string) {
    super(message);
  }
}

/** Serve a scorer over stdin/stdout until the input stream closes. */
export async function serveLoop(scorer: Scorer): Promise<void> {
  const lines = createInterface({ input: process.stdin, crlfDelay: Infinity });
  for await (const line of lines) {
    if (!line.trim()) continue;
    let reply: string;
    try {
      const request = parseRequest(line);
      const scores = await scorer(request.points);
      if (scores.length !== request.points.length) {
        throw new ProtocolError(request.id, 'scorer returned the wrong number of scores');
      }
      reply = JSON.stringify({ id: request.id, scores });
    } catch (err) {
      const id = err instanceof ProtocolError ? err.id : null;
      const message = err instanceof Error ? err.message : String(err);
      process.stderr.write(`request failed: ${message}\n`);
      reply = JSON.stringify({ id, error: message });
    }
    process.stdout.write(reply + '\n');
  }
}
