/**
 * Entry point and router. Three views, addressed by pathname:
 *
 *   /                     submit (upload or repository link)
 *   /reproduce/...        reproduction page (same path the API serves)
 *   + an in-page run view once a job is started
 *
 * Navigation uses pushState so the address bar always shows a shareable
 * path; the server returns this shell for any text/html request.
 */
import { ApiError, fetchPage, fetchStatus, startRun, TERMINAL_STATES, uploadBundle, uploadInput, } from './api.js';
import { LogFollower } from './logstream.js';
import { applyStatus, buildRunRequest, renderReproduction, renderRun, renderSubmit, } from './pages.js';
import { QuoteError } from './shellwords.js';
const app = document.getElementById('app');
function show(view) {
    app.textContent = '';
    app.append(view);
}
function navigate(path) {
    history.pushState({}, '', path);
    void route();
}
function describe(err) {
    if (err instanceof ApiError) {
        if (err.status === 429)
            return `${err.detail} — try again shortly`;
        return err.detail || err.error;
    }
    return err instanceof Error ? err.message : String(err);
}
// -- submit ------------------------------------------------------------------
function submitView() {
    const view = renderSubmit({
        onFile: (file) => {
            const progress = view.querySelector('#upload-progress');
            const error = view.querySelector('#submit-error');
            error.textContent = '';
            progress.hidden = false;
            uploadBundle(file, (fraction) => (progress.value = fraction))
                .then((result) => navigate(result.reproduce_path))
                .catch((err) => {
                progress.hidden = true;
                error.textContent = describe(err);
            });
        },
        onLink: (path) => navigate(path),
    });
    return view;
}
// -- reproduction ------------------------------------------------------------
async function reproductionView(path) {
    const page = await fetchPage(path);
    const view = renderReproduction(page, {
        onReplaceInput: async (_logical, file) => (await uploadInput(file)).upload_id,
        onRun: (edits) => {
            const error = view.querySelector('#run-error');
            error.textContent = '';
            let body;
            try {
                body = buildRunRequest(page, edits);
            }
            catch (err) {
                if (err instanceof QuoteError) {
                    error.textContent = `command line: ${err.message}`;
                    return;
                }
                throw err;
            }
            startRun(page.repro_id, body)
                .then((accepted) => runView(accepted.job_id))
                .catch((err) => (error.textContent = describe(err)));
        },
    });
    return view;
}
// -- run ---------------------------------------------------------------------
function runView(jobId) {
    const view = renderRun(jobId);
    show(view);
    const pane = view.querySelector('#log');
    const follower = new LogFollower(jobId);
    void follower.follow({
        onChunk: (text) => {
            pane.append(text);
            pane.scrollTop = pane.scrollHeight;
        },
        onEnd: () => void poll(true),
        onError: (err) => {
            view.querySelector('#job-error').textContent = describe(err);
        },
        onReconnect: () => {
            // the offset-addressed resume makes this invisible in the pane
        },
    });
    let timer;
    async function poll(final = false) {
        try {
            const status = await fetchStatus(jobId);
            applyStatus(view, status);
            if (!final && !TERMINAL_STATES.has(status.state)) {
                timer = setTimeout(() => void poll(), 1000);
            }
            else if (final || TERMINAL_STATES.has(status.state)) {
                if (timer)
                    clearTimeout(timer);
            }
        }
        catch (err) {
            view.querySelector('#job-error').textContent = describe(err);
        }
    }
    void poll();
}
// -- router ------------------------------------------------------------------
async function route() {
    const path = location.pathname;
    if (path.startsWith('/reproduce/')) {
        try {
            show(await reproductionView(path));
        }
        catch (err) {
            const view = submitView();
            show(view);
            view.querySelector('#submit-error').textContent = describe(err);
        }
    }
    else {
        show(submitView());
    }
}
window.addEventListener('popstate', () => void route());
void route();
