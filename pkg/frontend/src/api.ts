/** Typed client for the editing service JSON API under /api/v1. */

export interface SessionState {
  env_id: string | null;
  env_yaw: number;
  yaw: number;
  pitch: number;
  roll: number;
  exposure: number;
  p: number;
  q: number;
}

export interface SessionInfo {
  session_id: string;
  render_url: string;
  timing_ms: number;
  rev: number;
  state: SessionState;
  kind: string;
}

export interface EnvEntry {
  id: string;
}

export type EditDelta = Partial<SessionState> & { env_hdr_b64?: string };

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

async function asJson<T>(res: Response): Promise<T> {
  if (!res.ok) {
    let detail = res.statusText;
    try {
      const body = (await res.json()) as { error?: string };
      if (body.error) detail = body.error;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(res.status, detail);
  }
  return (await res.json()) as T;
}

export class ApiClient {
  constructor(readonly baseUrl: string) {}

  private url(path: string): string {
    return `${this.baseUrl}/api/v1${path}`;
  }

  async health(): Promise<boolean> {
    try {
      const res = await fetch(this.url("/healthz"));
      return res.ok;
    } catch {
      return false;
    }
  }

  async envmaps(): Promise<EnvEntry[]> {
    const doc = await asJson<{ envmaps: EnvEntry[] }>(
      await fetch(this.url("/envmaps")),
    );
    return doc.envmaps;
  }

  envThumbUrl(envId: string): string {
    return this.url(`/envmaps/${envId}/thumb.png`);
  }

  async createSession(spec: Record<string, unknown>): Promise<SessionInfo> {
    const res = await fetch(this.url("/sessions"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(spec),
    });
    return asJson<SessionInfo>(res);
  }

  async edit(sessionId: string, delta: EditDelta): Promise<SessionInfo> {
    const res = await fetch(this.url(`/sessions/${sessionId}/edit`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(delta),
    });
    return asJson<SessionInfo>(res);
  }

  imageUrl(info: SessionInfo): string {
    return `${this.baseUrl}${info.render_url}`;
  }
}
