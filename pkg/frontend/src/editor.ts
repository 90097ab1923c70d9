/** Editor session logic: slider state in UI units (degrees), debounced edits
 * with a single in-flight request where the trailing change wins. */

import { ApiClient, EnvEntry, SessionInfo, SessionState } from "./api.js";
import { debounce } from "./debounce.js";

const DEG = Math.PI / 180;

/** Slider-facing state; angles in degrees, converted to radians on the wire. */
export interface Controls {
  envId: string | null;
  envYawDeg: number;
  yawDeg: number;
  pitchDeg: number;
  rollDeg: number;
  exposure: number;
  p: number;
  q: number;
}

export const CONTROL_LIMITS = {
  envYawDeg: [-180, 180],
  yawDeg: [-180, 180],
  pitchDeg: [-90, 90],
  rollDeg: [-45, 45],
  exposure: [0.05, 8],
} as const;

export interface EditorEvents {
  onRender?: (ed: Editor) => void;
  onError?: (ed: Editor, message: string) => void;
  onCatalog?: (ed: Editor, envs: EnvEntry[]) => void;
}

export function controlsFromState(state: SessionState): Controls {
  return {
    envId: state.env_id,
    envYawDeg: state.env_yaw / DEG,
    yawDeg: state.yaw / DEG,
    pitchDeg: state.pitch / DEG,
    rollDeg: state.roll / DEG,
    exposure: state.exposure,
    p: state.p,
    q: state.q,
  };
}

export function stateFromControls(c: Controls): SessionState {
  return {
    env_id: c.envId,
    env_yaw: c.envYawDeg * DEG,
    yaw: c.yawDeg * DEG,
    pitch: c.pitchDeg * DEG,
    roll: c.rollDeg * DEG,
    exposure: c.exposure,
    p: c.p,
    q: c.q,
  };
}

export class Editor {
  controls: Controls;
  envs: EnvEntry[] = [];
  session: SessionInfo | null = null;
  beforeUrl = "";
  afterUrl = "";
  showBefore = false;
  latencyMs = 0;
  lastError = "";
  editRequests = 0; // for tests and the debug readout

  private inFlight = false;
  private pending = false;
  private readonly scheduleSubmit: (() => void) & { cancel: () => void };

  constructor(
    private readonly api: ApiClient,
    private readonly events: EditorEvents = {},
    debounceMs = 100,
  ) {
    this.controls = {
      envId: null, envYawDeg: 0, yawDeg: 0, pitchDeg: 0, rollDeg: 0,
      exposure: 1, p: 0, q: 0,
    };
    this.scheduleSubmit = debounce(() => void this.submit(), debounceMs);
  }

  async connect(spec: Record<string, unknown>): Promise<void> {
    if (!(await this.api.health())) {
      this.lastError = "service unreachable";
      this.events.onError?.(this, this.lastError);
      throw new Error(this.lastError);
    }
    this.envs = await this.api.envmaps();
    this.events.onCatalog?.(this, this.envs);
    const info = await this.api.createSession(spec);
    this.session = info;
    this.controls = controlsFromState(info.state);
    this.beforeUrl = this.api.imageUrl(info);
    this.afterUrl = this.beforeUrl;
    this.latencyMs = info.timing_ms;
    this.lastError = "";
    this.events.onRender?.(this);
  }

  /** Slider/toggle handler; schedules a debounced edit. */
  setControl<K extends keyof Controls>(key: K, value: Controls[K]): void {
    this.controls[key] = value;
    this.scheduleSubmit();
  }

  toggleBeforeAfter(): void {
    // pure view swap: no request
    this.showBefore = !this.showBefore;
    this.events.onRender?.(this);
  }

  get displayedUrl(): string {
    return this.showBefore ? this.beforeUrl : this.afterUrl;
  }

  /** Single in-flight edit; the latest controls win when one is running. */
  private async submit(): Promise<void> {
    if (!this.session) return;
    if (this.inFlight) {
      this.pending = true;
      return;
    }
    this.inFlight = true;
    try {
      const state = stateFromControls(this.controls);
      this.editRequests += 1;
      const info = await this.api.edit(this.session.session_id, state);
      this.session = info;
      this.afterUrl = this.api.imageUrl(info);
      this.latencyMs = info.timing_ms;
      this.lastError = "";
      this.events.onRender?.(this);
    } catch (err) {
      // keep the previous image; surface the failure
      this.lastError = err instanceof Error ? err.message : String(err);
      this.events.onError?.(this, this.lastError);
    } finally {
      this.inFlight = false;
      if (this.pending) {
        this.pending = false;
        void this.submit();
      }
    }
  }

  /** Wait until no edit is running or queued (tests and teardown). */
  async settle(timeoutMs = 2000): Promise<void> {
    const t0 = Date.now();
    while (this.inFlight || this.pending) {
      if (Date.now() - t0 > timeoutMs) throw new Error("editor did not settle");
      await new Promise((r) => setTimeout(r, 10));
    }
  }
}
