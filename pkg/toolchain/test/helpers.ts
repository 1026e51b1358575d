import { execFileSync } from 'node:child_process';

/** Run the engine CLI and return parsed JSON from stdout. */
export function engine(args: string[]): { code: number; out: any; err: string } {
  try {
    const out = execFileSync('python3', ['-m', 'mcuenc', ...args], {
      encoding: 'utf8',
      stdio: ['ignore', 'pipe', 'pipe'],
    });
    return { code: 0, out: out.trim() ? JSON.parse(out) : null, err: '' };
  } catch (e: any) {
    return { code: e.status ?? 1, out: null, err: String(e.stderr ?? '') };
  }
}
