/**
 * Entry point: serve a score model over the stdio JSON-lines protocol.
 *
 *   node dist/main.js --mock-plane nx,ny,nz,offset,blur
 *   node dist/main.js --model /path/to/model.json [--normalize sphere]
 *
 * Startup failures (bad flags, unreadable model) exit nonzero with a
 * diagnostic on stderr; once serving, malformed requests get error replies
 * and the loop keeps running.
 */

import { parsePlaneSpec, planeScorer } from './planeScore.js';
import { normalizedScorer, parseNormalization, tfjsScorer } from './modelScore.js';
import { serveLoop, type Scorer } from './protocol.js';

interface Args {
  mockPlane?: string;
  model?: string;
  normalize: string;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { normalize: 'sphere' };
  for (let i = 0; i < argv.length; i += 1) {
    const flag = argv[i];
    const value = argv[i + 1];
    switch (flag) {
      case '--mock-plane':
        args.mockPlane = value;
        i += 1;
        break;
      case '--model':
        args.model = value;
        i += 1;
        break;
      case '--normalize':
        args.normalize = value ?? '';
        i += 1;
        break;
      default:
        throw new Error(`unknown flag ${flag}`);
    }
  }
  if (!args.mockPlane && !args.model) {
    throw new Error('need --mock-plane or --model');
  }
  if (args.mockPlane && args.model) {
    throw new Error('--mock-plane and --model are mutually exclusive');
  }
  return args;
}

async function buildScorer(args: Args): Promise<Scorer> {
  if (args.mockPlane) {
    return planeScorer(parsePlaneSpec(args.mockPlane));
  }
  const raw = await tfjsScorer(args.model!);
  return normalizedScorer(raw, parseNormalization(args.normalize));
}

async function main(): Promise<void> {
  let scorer: Scorer;
  try {
    scorer = await buildScorer(parseArgs(process.argv.slice(2)));
  } catch (err) {
    process.stderr.write(`startup failure: ${err instanceof Error ? err.message : err}\n`);
    process.exit(1);
  }
  process.stderr.write('score bridge ready\n');
  await serveLoop(scorer!);
}

void main();
