/**
 * Shell-like command line splitting and joining.
 *
 * The UI shows each recorded command as one editable line of text and
 * submits the whole argv on change, so the split rules are part of the
 * UI contract (documented in the help popover):
 *
 *   - arguments are separated by unquoted whitespace
 *   - '…' is literal, no escapes inside
 *   - "…" allows \" and \\ escapes
 *   - outside quotes, \x is a literal x
 *
 * No variable expansion, globbing, or command substitution — the server
 * receives an exact argument vector.
 */

export class QuoteError extends Error {}

export function splitCommandLine(line: string): string[] {
  const args: string[] = [];
  let current = '';
  let started = false;
  let i = 0;
  while (i < line.length) {
    const ch = line[i];
    if (ch === ' ' || ch === '\t' || ch === '\n') {
      if (started) {
        args.push(current);
        current = '';
        started = false;
      }
      i += 1;
    } else if (ch === "'") {
      started = true;
      const end = line.indexOf("'", i + 1);
      if (end === -1) throw new QuoteError("unterminated ' quote");
      current += line.slice(i + 1, end);
      i = end + 1;
    } else if (ch === '"') {
      started = true;
      i += 1;
      for (;;) {
        if (i >= line.length) throw new QuoteError('unterminated " quote');
        const c = line[i];
        if (c === '"') {
          i += 1;
          break;
        }
        if (c === '\\' && (line[i + 1] === '"' || line[i + 1] === '\\')) {
          current += line[i + 1];
          i += 2;
        } else {
          current += c;
          i += 1;
        }
      }
    } else if (ch === '\\') {
      if (i + 1 >= line.length) throw new QuoteError('trailing backslash');
      started = true;
      current += line[i + 1];
      i += 2;
    } else {
      started = true;
      current += ch;
      i += 1;
    }
  }
  if (started) args.push(current);
  return args;
}

const PLAIN = /^[A-Za-z0-9_\-./:=%@+,]+$/;

/** Inverse of splitCommandLine: joinCommandLine(argv) round-trips. */
export function joinCommandLine(argv: string[]): string {
  return argv
    .map((arg) => {
      if (arg !== '' && PLAIN.test(arg)) return arg;
      // single quotes are literal; close, escape the quote, reopen
      return "'" + arg.replace(/'/g, "'\\''") + "'";
    })
    .join(' ');
}
