// @vitest-environment jsdom
import { describe, expect, it, vi } from 'vitest';

import type { JobStatus, PageData } from '../src/api.js';
import {
  applyStatus,
  buildRunRequest,
  downloadableOutputs,
  permanentLink,
  renderReproduction,
  renderRun,
  renderSubmit,
  RunEdits,
} from '../src/pages.js';
import { QuoteError } from '../src/shellwords.js';

function page(overrides: Partial<PageData> = {}): PageData {
  return {
    repro_id: 'r1',
    canonical_path: '/reproduce/figshare.com/3546675',
    short_id: null,
    provider: 'figshare.com',
    external_id: '3546675',
    persistence_class: 'persistent',
    bundle_digest: 'deadbeef',
    created_at: 0,
    summary: {
      runs: [
        {
          run_id: 'main',
          argv: ['sh', '-c', 'echo hello > /out/out.txt'],
          working_dir: '/',
          expected_exit: 0,
          env_overrides: {},
        },
      ],
      input_files: [{ logical_name: 'data.txt', path: '/in/data.txt' }],
      output_files: [{ logical_name: 'out.txt', path: '/out/out.txt' }],
      environment: {},
      os: { distribution: 'ubuntu', version: '22.04', architecture: 'x86_64' },
    },
    base_image_warning: null,
    links: { run: '/api/run/r1' },
    ...overrides,
  };
}

function edits(): RunEdits {
  return { commands: new Map(), inputReplacements: new Map() };
}

describe('buildRunRequest', () => {
  it('sends nothing for untouched commands', () => {
    expect(buildRunRequest(page(), edits())).toEqual({});
  });

  it('sends nothing when the text matches the recorded argv', () => {
    const e = edits();
    e.commands.set('main', "sh -c 'echo hello > /out/out.txt'");
    expect(buildRunRequest(page(), e)).toEqual({});
  });

  it('splits an edited command into a whole-argv override', () => {
    const e = edits();
    e.commands.set('main', "sh -c 'echo bye > /out/out.txt'");
    expect(buildRunRequest(page(), e)).toEqual({
      argv: { main: ['sh', '-c', 'echo bye > /out/out.txt'] },
    });
  });

  it('carries input replacements and the wall limit', () => {
    const e = edits();
    e.inputReplacements.set('data.txt', 'u123');
    e.wallSeconds = 60;
    expect(buildRunRequest(page(), e)).toEqual({
      inputs: { 'data.txt': 'u123' },
      wall_clock_seconds: 60,
    });
  });

  it('propagates quoting errors for the form to display', () => {
    const e = edits();
    e.commands.set('main', "sh -c 'unterminated");
    expect(() => buildRunRequest(page(), e)).toThrow(QuoteError);
  });
});

describe('permanentLink', () => {
  it('is origin + canonical path, exactly', () => {
    expect(permanentLink('http://localhost:8080', page())).toBe(
      'http://localhost:8080/reproduce/figshare.com/3546675',
    );
    expect(permanentLink('https://repro.example/', page())).toBe(
      'https://repro.example/reproduce/figshare.com/3546675',
    );
  });
});

describe('renderReproduction', () => {
  const handlers = {
    onRun: () => {},
    onReplaceInput: async () => 'u1',
  };

  it('prefills each command field with the joined recorded argv', () => {
    const view = renderReproduction(page(), handlers);
    const input = view.querySelector<HTMLInputElement>('input.command')!;
    expect(input.value).toBe("sh -c 'echo hello > /out/out.txt'");
    expect(input.dataset.run).toBe('main');
  });

  it('shows the canonical permanent link and copies it', async () => {
    const writes: string[] = [];
    vi.stubGlobal('navigator', {
      clipboard: { writeText: async (t: string) => void writes.push(t) },
    });
    const view = renderReproduction(page(), handlers);
    expect(view.querySelector('#permanent-link')!.textContent).toBe(
      location.origin + '/reproduce/figshare.com/3546675',
    );
    view.querySelector<HTMLButtonElement>('button.copy')!.click();
    expect(writes).toEqual([location.origin + '/reproduce/figshare.com/3546675']);
    vi.unstubAllGlobals();
  });

  it('shows the persistence badge and any base image warning', () => {
    const warned = page({ base_image_warning: 'no exact base image for alpine/3.19' });
    const view = renderReproduction(warned, handlers);
    expect(view.querySelector('.badge')!.textContent).toBe('persistent');
    expect(view.querySelector('.warning')!.textContent).toContain('alpine/3.19');
    expect(renderReproduction(page(), handlers).querySelector('.warning')).toBeNull();
  });

  it('lists declared inputs with a file-replace control each', () => {
    const view = renderReproduction(page(), handlers);
    const picker = view.querySelector<HTMLInputElement>('input[type=file]')!;
    expect(picker.dataset.input).toBe('data.txt');
  });

  it('hands the collected edits to onRun', () => {
    let got: RunEdits | null = null;
    const view = renderReproduction(page(), {
      ...handlers,
      onRun: (e) => (got = e),
    });
    const input = view.querySelector<HTMLInputElement>('input.command')!;
    input.value = 'tr a-z A-Z';
    input.dispatchEvent(new Event('input'));
    view.querySelector<HTMLButtonElement>('#run')!.click();
    expect(got!.commands.get('main')).toBe('tr a-z A-Z');
  });
});

describe('run view status rendering', () => {
  function status(overrides: Partial<JobStatus> = {}): JobStatus {
    return {
      job_id: 'j1',
      repro_id: 'r1',
      state: 'RUNNING',
      queue_position: null,
      created_at: 0,
      started_at: 1,
      finished_at: null,
      termination: null,
      error: null,
      runs: [],
      outputs: [],
      log_url: '/api/log/j1',
      ...overrides,
    };
  }

  it('shows download links only once the job is terminal', () => {
    const out = {
      logical_name: 'out.txt',
      size_bytes: 6,
      download_url: '/api/output/j1/out.txt',
    };
    expect(downloadableOutputs(status({ outputs: [out] }))).toEqual([]);

    const view = renderRun('j1');
    applyStatus(view, status({ outputs: [out] }));
    expect(view.querySelectorAll('#job-outputs a').length).toBe(0);

    applyStatus(view, status({ state: 'SUCCEEDED', outputs: [out] }));
    const link = view.querySelector<HTMLAnchorElement>('#job-outputs a')!;
    expect(link.getAttribute('href')).toBe('/api/output/j1/out.txt');
    expect(link.getAttribute('download')).toBe('out.txt');
  });

  it('renders queue position, per-run exits, and the error line', () => {
    const view = renderRun('j1');
    applyStatus(view, status({ state: 'QUEUED', queue_position: 2 }));
    expect(view.querySelector('#job-state')!.textContent).toBe('QUEUED (position 2)');

    applyStatus(
      view,
      status({
        state: 'FAILED',
        error: 'run main exited 3',
        runs: [{ run_id: 'main', exit_code: 3, duration_seconds: 0.05 }],
      }),
    );
    expect(view.querySelector('#job-runs')!.textContent).toContain('exit 3');
    expect(view.querySelector('#job-error')!.textContent).toBe('run main exited 3');
  });
});

describe('renderSubmit', () => {
  it('normalizes pasted repository links to reproduce paths', () => {
    const opened: string[] = [];
    const view = renderSubmit({ onFile: () => {}, onLink: (p) => opened.push(p) });
    const link = view.querySelector<HTMLInputElement>('#bundle-link')!;
    const form = view.querySelector('form')!;

    for (const [pasted, expected] of [
      ['figshare.com/3546675', '/reproduce/figshare.com/3546675'],
      ['https://osf.io/5ztp2', '/reproduce/osf.io/5ztp2'],
      ['/reproduce/osf.io/5ztp2', '/reproduce/osf.io/5ztp2'],
    ]) {
      link.value = pasted;
      form.dispatchEvent(new Event('submit'));
      expect(opened.pop()).toBe(expected);
    }
  });

  it('hands a chosen file to onFile', () => {
    const files: File[] = [];
    const view = renderSubmit({ onFile: (f) => files.push(f), onLink: () => {} });
    const picker = view.querySelector<HTMLInputElement>('#bundle-file')!;
    const file = new File(['x'], 'exp.rpz');
    Object.defineProperty(picker, 'files', { value: [file] });
    picker.dispatchEvent(new Event('change'));
    expect(files).toEqual([file]);
  });
});
