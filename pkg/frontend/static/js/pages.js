/**
 * View construction. Everything here is a pure function from data (and
 * callbacks) to DOM nodes, so views are testable without a server: hand
 * them a PageData/JobStatus literal and inspect the tree.
 */
import { TERMINAL_STATES, } from './api.js';
import { joinCommandLine, splitCommandLine } from './shellwords.js';
/**
 * Turn the edit state into a run request. Only commands whose text
 * differs from the recorded argv become overrides — an untouched field
 * submits nothing, so the server reproduces the recorded run exactly.
 */
export function buildRunRequest(page, edits) {
    const argv = {};
    for (const run of page.summary.runs) {
        const text = edits.commands.get(run.run_id);
        if (text === undefined)
            continue;
        if (text.trim() === joinCommandLine(run.argv))
            continue;
        argv[run.run_id] = splitCommandLine(text); // QuoteError propagates to the form
    }
    const body = {};
    if (Object.keys(argv).length > 0)
        body.argv = argv;
    if (edits.inputReplacements.size > 0) {
        body.inputs = Object.fromEntries(edits.inputReplacements);
    }
    if (edits.wallSeconds !== undefined)
        body.wall_clock_seconds = edits.wallSeconds;
    return body;
}
/** The copyable permanent link: always the canonical path, absolute. */
export function permanentLink(origin, page) {
    return origin.replace(/\/+$/, '') + page.canonical_path;
}
export function downloadableOutputs(status) {
    return TERMINAL_STATES.has(status.state) ? status.outputs : [];
}
export function el(tag, attrs = {}, ...children) {
    const node = document.createElement(tag);
    for (const [key, value] of Object.entries(attrs)) {
        if (key === 'class')
            node.className = value;
        else
            node.setAttribute(key, value);
    }
    for (const child of children) {
        if (child === null)
            continue;
        node.append(child);
    }
    return node;
}
function field(labelText, control) {
    return el('label', { class: 'field' }, el('span', {}, labelText), control);
}
export function renderSubmit(handlers) {
    const file = el('input', { type: 'file', accept: '.rpz', id: 'bundle-file' });
    file.addEventListener('change', () => {
        if (file.files && file.files[0])
            handlers.onFile(file.files[0]);
    });
    const link = el('input', {
        type: 'text',
        id: 'bundle-link',
        placeholder: 'figshare.com/3546675 or osf.io/5ztp2',
    });
    const go = el('button', { type: 'submit' }, 'Open');
    const form = el('form', { class: 'link-form' }, link, go);
    form.addEventListener('submit', (event) => {
        event.preventDefault();
        const raw = link.value.trim();
        if (!raw)
            return;
        const path = raw.startsWith('/reproduce/')
            ? raw
            : '/reproduce/' + raw.replace(/^https?:\/\//, '').replace(/^\/+/, '');
        handlers.onLink(path);
    });
    return el('section', { class: 'submit' }, el('h2', {}, 'Reproduce an experiment'), field('Upload a bundle (.rpz)', file), el('progress', { id: 'upload-progress', max: '1', value: '0', hidden: '' }), el('p', { class: 'or' }, 'or'), field('Repository link', form), el('p', { id: 'submit-error', class: 'error', role: 'alert' }));
}
export function renderReproduction(page, handlers) {
    const edits = { commands: new Map(), inputReplacements: new Map() };
    const badge = el('span', { class: `badge ${page.persistence_class}` }, page.persistence_class);
    const link = permanentLink(location.origin, page);
    const copy = el('button', { class: 'copy', title: 'Copy permanent link' }, 'Copy');
    copy.addEventListener('click', () => {
        void navigator.clipboard.writeText(link);
        copy.textContent = 'Copied';
        setTimeout(() => (copy.textContent = 'Copy'), 1500);
    });
    const runRows = page.summary.runs.map((run) => {
        const input = el('input', {
            type: 'text',
            class: 'command',
            'data-run': run.run_id,
            value: joinCommandLine(run.argv),
        });
        input.addEventListener('input', () => edits.commands.set(run.run_id, input.value));
        return el('div', { class: 'run-row' }, el('code', { class: 'run-id' }, run.run_id), input, el('span', { class: 'workdir' }, `in ${run.working_dir}`));
    });
    const inputRows = page.summary.input_files.map((io) => {
        const picker = el('input', { type: 'file', 'data-input': io.logical_name });
        const state = el('span', { class: 'replace-state' });
        picker.addEventListener('change', async () => {
            const file = picker.files?.[0];
            if (!file)
                return;
            state.textContent = 'uploading…';
            try {
                const uploadId = await handlers.onReplaceInput(io.logical_name, file);
                edits.inputReplacements.set(io.logical_name, uploadId);
                state.textContent = `will use ${file.name}`;
            }
            catch (err) {
                state.textContent = err instanceof Error ? err.message : String(err);
            }
        });
        return el('div', { class: 'input-row' }, el('code', {}, io.logical_name), el('span', { class: 'path' }, io.path), picker, state);
    });
    const runButton = el('button', { class: 'primary', id: 'run' }, 'Run');
    runButton.addEventListener('click', () => handlers.onRun(edits));
    return el('section', { class: 'reproduction' }, el('header', {}, el('h2', {}, `${page.provider}/${page.external_id}`), badge, el('span', { class: 'permanent-link', id: 'permanent-link' }, link), copy), page.base_image_warning
        ? el('p', { class: 'warning', role: 'alert' }, page.base_image_warning)
        : null, el('h3', {}, 'Commands'), el('p', { class: 'hint' }, 'Edit a line to override that run. Quoting: \'…\' literal, "…" with \\" escapes, space-separated.'), ...runRows, page.summary.input_files.length > 0 ? el('h3', {}, 'Inputs') : null, ...inputRows, el('p', { id: 'run-error', class: 'error', role: 'alert' }), runButton);
}
// -- run view ----------------------------------------------------------------
export function renderRun(jobId) {
    return el('section', { class: 'run-view' }, el('header', {}, el('h2', {}, `Job ${jobId}`), el('span', { id: 'job-state', class: 'state' }, '…')), el('pre', { id: 'log', class: 'log', 'aria-live': 'polite' }), el('div', { id: 'job-runs' }), el('div', { id: 'job-outputs' }), el('p', { id: 'job-error', class: 'error', role: 'alert' }));
}
/** Update the run view's non-log parts from a status document. */
export function applyStatus(root, status) {
    const state = root.querySelector('#job-state');
    state.textContent =
        status.state === 'QUEUED' && status.queue_position !== null
            ? `QUEUED (position ${status.queue_position})`
            : status.state;
    state.className = `state ${status.state.toLowerCase()}`;
    const runs = root.querySelector('#job-runs');
    runs.textContent = '';
    for (const r of status.runs) {
        runs.append(el('div', { class: 'exit-row' }, el('code', {}, r.run_id), el('span', {}, `exit ${r.exit_code} in ${r.duration_seconds}s`)));
    }
    const outputs = root.querySelector('#job-outputs');
    outputs.textContent = '';
    const downloadable = downloadableOutputs(status);
    if (downloadable.length > 0)
        outputs.append(el('h3', {}, 'Outputs'));
    for (const out of downloadable) {
        outputs.append(el('div', { class: 'output-row' }, el('a', { href: out.download_url, download: out.logical_name }, out.logical_name), el('span', { class: 'size' }, `${out.size_bytes} bytes`)));
    }
    const error = root.querySelector('#job-error');
    error.textContent = status.error ?? '';
}
