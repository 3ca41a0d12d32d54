/**
 * Typed client for the reproduction service API.
 *
 * Every network call the UI makes goes through here, and every function
 * maps to exactly one documented endpoint — the UI never talks to the
 * object store or registry directly (presigned URLs are opaque).
 */

export interface RunSummary {
  run_id: string;
  argv: string[];
  working_dir: string;
  expected_exit: number;
  env_overrides: Record<string, string>;
}

export interface IoFileSummary {
  logical_name: string;
  path: string;
}

export interface ManifestSummary {
  runs: RunSummary[];
  input_files: IoFileSummary[];
  output_files: IoFileSummary[];
  environment: Record<string, string>;
  os: { distribution: string; version: string; architecture: string };
}

export interface PageData {
  repro_id: string;
  canonical_path: string;
  short_id: string | null;
  provider: string;
  external_id: string;
  persistence_class: 'persistent' | 'ephemeral';
  bundle_digest: string;
  created_at: number;
  summary: ManifestSummary;
  base_image_warning: string | null;
  links: { run: string };
}

export interface RunRequest {
  runs?: string[];
  argv?: Record<string, string[]>;
  env?: Record<string, Record<string, string>>;
  inputs?: Record<string, string>;
  wall_clock_seconds?: number;
  memory_bytes?: number;
}

export interface RunAccepted {
  job_id: string;
  repro_id: string;
  status_url: string;
  log_url: string;
}

export type JobState =
  | 'QUEUED'
  | 'BUILDING'
  | 'RUNNING'
  | 'SUCCEEDED'
  | 'FAILED'
  | 'TIMEOUT'
  | 'CANCELLED';

export const TERMINAL_STATES: ReadonlySet<JobState> = new Set([
  'SUCCEEDED',
  'FAILED',
  'TIMEOUT',
  'CANCELLED',
]);

export interface RunResult {
  run_id: string;
  exit_code: number;
  duration_seconds: number;
}

export interface OutputEntry {
  logical_name: string;
  size_bytes: number;
  download_url: string;
  presigned_url?: string;
}

export interface JobStatus {
  job_id: string;
  repro_id: string;
  state: JobState;
  queue_position: number | null;
  created_at: number;
  started_at: number | null;
  finished_at: number | null;
  termination: string | null;
  error: string | null;
  runs: RunResult[];
  outputs: OutputEntry[];
  log_url: string;
}

export interface UploadResult {
  short_id: string;
  reproduce_path: string;
}

export interface InputUploadResult {
  upload_id: string;
  size_bytes: number;
}

/** A typed error envelope from the service: {error, detail} plus HTTP status. */
export class ApiError extends Error {
  constructor(
    public status: number,
    public error: string,
    public detail: string,
  ) {
    super(`${error}: ${detail}`);
  }
}

async function raiseFor(resp: Response): Promise<never> {
  let name = `HTTP ${resp.status}`;
  let detail = resp.statusText;
  try {
    const doc = await resp.json();
    if (doc && typeof doc.error === 'string') {
      name = doc.error;
      detail = String(doc.detail ?? '');
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(resp.status, name, detail);
}

async function getJson<T>(url: string): Promise<T> {
  const resp = await fetch(url, { headers: { Accept: 'application/json' } });
  if (!resp.ok) await raiseFor(resp);
  return resp.json() as Promise<T>;
}

export function fetchPage(path: string): Promise<PageData> {
  return getJson<PageData>(path);
}

export function fetchStatus(jobId: string): Promise<JobStatus> {
  return getJson<JobStatus>(`/api/status/${jobId}`);
}

export async function startRun(repro: string, body: RunRequest): Promise<RunAccepted> {
  const resp = await fetch(`/api/run/${repro}`, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json', Accept: 'application/json' },
    body: JSON.stringify(body),
  });
  if (resp.status !== 202) await raiseFor(resp);
  return resp.json() as Promise<RunAccepted>;
}

/** Upload a replacement input file; the returned id goes into RunRequest.inputs. */
export async function uploadInput(file: File): Promise<InputUploadResult> {
  const form = new FormData();
  form.append('file', file);
  const resp = await fetch('/api/input', { method: 'POST', body: form });
  if (!resp.ok) await raiseFor(resp);
  return resp.json() as Promise<InputUploadResult>;
}

/**
 * Upload a bundle with progress reporting. XHR rather than fetch: upload
 * progress events have no fetch equivalent that works everywhere.
 */
export function uploadBundle(
  file: File,
  onProgress: (fraction: number) => void,
): Promise<UploadResult> {
  return new Promise((resolve, reject) => {
    const xhr = new XMLHttpRequest();
    xhr.upload.addEventListener('progress', (event) => {
      if (event.lengthComputable) onProgress(event.loaded / event.total);
    });
    xhr.addEventListener('load', () => {
      let doc: any = null;
      try {
        doc = JSON.parse(xhr.responseText);
      } catch {
        // fall through to the status check
      }
      if (xhr.status >= 200 && xhr.status < 300 && doc) {
        resolve(doc as UploadResult);
      } else if (doc && typeof doc.error === 'string') {
        reject(new ApiError(xhr.status, doc.error, String(doc.detail ?? '')));
      } else {
        reject(new ApiError(xhr.status, `HTTP ${xhr.status}`, xhr.statusText));
      }
    });
    xhr.addEventListener('error', () =>
      reject(new ApiError(0, 'NetworkError', 'upload connection failed')),
    );
    const form = new FormData();
    form.append('bundle', file);
    xhr.open('POST', '/api/upload');
    xhr.send(form);
  });
}
