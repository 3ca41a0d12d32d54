/**
 * Resumable live log follower.
 *
 * The log endpoint streams bytes from a client-supplied offset and holds
 * the connection open while the job runs. The follower tracks how many
 * bytes it has received; on any network failure it reconnects from that
 * offset, so the pane's content always equals the log's bytes exactly —
 * no loss, no duplication. Offsets count bytes, not characters: decoding
 * to text happens after offset bookkeeping, with a streaming decoder so
 * multi-byte characters split across chunks render correctly.
 */
export class LogFollower {
    constructor(jobId, opts = {}) {
        this.jobId = jobId;
        this.offset = 0;
        this.stopped = false;
        this.fetchImpl = opts.fetchImpl ?? fetch.bind(globalThis);
        this.retryDelayMs = opts.retryDelayMs ?? 1000;
        this.maxRetries = opts.maxRetries ?? Infinity;
    }
    stop() {
        this.stopped = true;
    }
    async follow(events) {
        const decoder = new TextDecoder('utf-8');
        let retries = 0;
        let sawBytesThisConnection = false;
        while (!this.stopped) {
            let resp;
            try {
                resp = await this.fetchImpl(`/api/log/${this.jobId}?offset=${this.offset}`);
            }
            catch (err) {
                if (++retries > this.maxRetries) {
                    events.onError(err instanceof Error ? err : new Error(String(err)));
                    return;
                }
                events.onReconnect?.(this.offset);
                await delay(this.retryDelayMs);
                continue;
            }
            if (!resp.ok) {
                events.onError(new Error(`log request failed with ${resp.status}`));
                return;
            }
            retries = 0;
            const reader = resp.body?.getReader();
            if (!reader) {
                events.onError(new Error('streaming response has no body'));
                return;
            }
            const before = this.offset;
            try {
                for (;;) {
                    const { value, done } = await reader.read();
                    if (done)
                        break;
                    if (value && value.byteLength > 0) {
                        this.offset += value.byteLength;
                        events.onChunk(decoder.decode(value, { stream: true }));
                    }
                }
            }
            catch (err) {
                // connection dropped mid-stream; resume from the last byte received
                if (++retries > this.maxRetries) {
                    events.onError(err instanceof Error ? err : new Error(String(err)));
                    return;
                }
                events.onReconnect?.(this.offset);
                await delay(this.retryDelayMs);
                continue;
            }
            sawBytesThisConnection = this.offset > before;
            // A clean close means end-of-log from the server — but an
            // intermediary can also close cleanly. One empty follow-up read
            // from the current offset disambiguates: at true end it returns
            // no bytes immediately.
            if (!sawBytesThisConnection) {
                events.onChunk(decoder.decode()); // flush any buffered partial char
                events.onEnd();
                return;
            }
        }
    }
}
function delay(ms) {
    return new Promise((resolve) => setTimeout(resolve, ms));
}
