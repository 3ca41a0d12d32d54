/**
 * Typed client for the reproduction service API.
 *
 * Every network call the UI makes goes through here, and every function
 * maps to exactly one documented endpoint — the UI never talks to the
 * object store or registry directly (presigned URLs are opaque).
 */
export const TERMINAL_STATES = new Set([
    'SUCCEEDED',
    'FAILED',
    'TIMEOUT',
    'CANCELLED',
]);
/** A typed error envelope from the service: {error, detail} plus HTTP status. */
export class ApiError extends Error {
    constructor(status, error, detail) {
        super(`${error}: ${detail}`);
        this.status = status;
        this.error = error;
        this.detail = detail;
    }
}
async function raiseFor(resp) {
    let name = `HTTP ${resp.status}`;
    let detail = resp.statusText;
    try {
        const doc = await resp.json();
        if (doc && typeof doc.error === 'string') {
            name = doc.error;
            detail = String(doc.detail ?? '');
        }
    }
    catch {
        // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, name, detail);
}
async function getJson(url) {
    const resp = await fetch(url, { headers: { Accept: 'application/json' } });
    if (!resp.ok)
        await raiseFor(resp);
    return resp.json();
}
export function fetchPage(path) {
    return getJson(path);
}
export function fetchStatus(jobId) {
    return getJson(`/api/status/${jobId}`);
}
export async function startRun(repro, body) {
    const resp = await fetch(`/api/run/${repro}`, {
        method: 'POST',
        headers: { 'Content-Type': 'application/json', Accept: 'application/json' },
        body: JSON.stringify(body),
    });
    if (resp.status !== 202)
        await raiseFor(resp);
    return resp.json();
}
/** Upload a replacement input file; the returned id goes into RunRequest.inputs. */
export async function uploadInput(file) {
    const form = new FormData();
    form.append('file', file);
    const resp = await fetch('/api/input', { method: 'POST', body: form });
    if (!resp.ok)
        await raiseFor(resp);
    return resp.json();
}
/**
 * Upload a bundle with progress reporting. XHR rather than fetch: upload
 * progress events have no fetch equivalent that works everywhere.
 */
export function uploadBundle(file, onProgress) {
    return new Promise((resolve, reject) => {
        const xhr = new XMLHttpRequest();
        xhr.upload.addEventListener('progress', (event) => {
            if (event.lengthComputable)
                onProgress(event.loaded / event.total);
        });
        xhr.addEventListener('load', () => {
            let doc = null;
            try {
                doc = JSON.parse(xhr.responseText);
            }
            catch {
                // fall through to the status check
            }
            if (xhr.status >= 200 && xhr.status < 300 && doc) {
                resolve(doc);
            }
            else if (doc && typeof doc.error === 'string') {
                reject(new ApiError(xhr.status, doc.error, String(doc.detail ?? '')));
            }
            else {
                reject(new ApiError(xhr.status, `HTTP ${xhr.status}`, xhr.statusText));
            }
        });
        xhr.addEventListener('error', () => reject(new ApiError(0, 'NetworkError', 'upload connection failed')));
        const form = new FormData();
        form.append('bundle', file);
        xhr.open('POST', '/api/upload');
        xhr.send(form);
    });
}
