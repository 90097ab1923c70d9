/** DOM wiring for the editor: sliders, toggles, env catalog, before/after. */

import { ApiClient } from "./api.js";
import { CONTROL_LIMITS, Controls, Editor } from "./editor.js";

interface SliderSpec {
  key: keyof Controls;
  label: string;
  min: number;
  max: number;
  step: number;
}

const SLIDERS: SliderSpec[] = [
  { key: "envYawDeg", label: "Environment yaw", min: CONTROL_LIMITS.envYawDeg[0], max: CONTROL_LIMITS.envYawDeg[1], step: 1 },
  { key: "yawDeg", label: "Pose yaw", min: CONTROL_LIMITS.yawDeg[0], max: CONTROL_LIMITS.yawDeg[1], step: 1 },
  { key: "pitchDeg", label: "Pose pitch", min: CONTROL_LIMITS.pitchDeg[0], max: CONTROL_LIMITS.pitchDeg[1], step: 1 },
  { key: "rollDeg", label: "Pose roll", min: CONTROL_LIMITS.rollDeg[0], max: CONTROL_LIMITS.rollDeg[1], step: 1 },
  { key: "exposure", label: "Exposure", min: CONTROL_LIMITS.exposure[0], max: CONTROL_LIMITS.exposure[1], step: 0.05 },
];

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document, tag: K, cls?: string, text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (cls) node.className = cls;
  if (text) node.textContent = text;
  return node;
}

export interface MountedEditor {
  editor: Editor;
  root: HTMLElement;
  sliders: Map<keyof Controls, HTMLInputElement>;
  afterImg: HTMLImageElement;
}

/** Build the editor UI inside `root` and connect to the service. */
export async function mountEditor(
  root: HTMLElement,
  api: ApiClient,
  sessionSpec: Record<string, unknown>,
  debounceMs = 100,
): Promise<MountedEditor> {
  const doc = root.ownerDocument;
  root.innerHTML = "";

  const banner = el(doc, "div", "error-banner");
  banner.style.display = "none";
  const retry = el(doc, "button", "retry", "Retry");
  banner.append(retry);
  root.append(banner);

  const stage = el(doc, "div", "stage");
  const img = el(doc, "img", "render");
  img.alt = "render";
  stage.append(img);
  root.append(stage);

  const meta = el(doc, "div", "meta");
  const latency = el(doc, "span", "latency", "– ms");
  const viewToggle = el(doc, "button", "toggle", "Show before");
  meta.append(viewToggle, latency);
  root.append(meta);

  const controlsBox = el(doc, "div", "controls");
  root.append(controlsBox);

  const sliders = new Map<keyof Controls, HTMLInputElement>();

  const editor = new Editor(api, {
    onRender: (ed) => {
      img.src = ed.displayedUrl;
      latency.textContent = `${ed.latencyMs.toFixed(1)} ms`;
      viewToggle.textContent = ed.showBefore ? "Show after" : "Show before";
      banner.style.display = "none";
    },
    onError: (_ed, message) => {
      banner.childNodes[0]?.remove();
      banner.prepend(doc.createTextNode(`Error: ${message} `));
      banner.style.display = "block";
    },
  }, debounceMs);

  viewToggle.addEventListener("click", () => editor.toggleBeforeAfter());
  retry.addEventListener("click", () => {
    void editor.connect(sessionSpec).catch(() => undefined);
  });

  for (const spec of SLIDERS) {
    const row = el(doc, "label", "row");
    row.append(el(doc, "span", "name", spec.label));
    const input = el(doc, "input");
    input.type = "range";
    input.min = String(spec.min);
    input.max = String(spec.max);
    input.step = String(spec.step);
    input.dataset.control = spec.key;
    input.addEventListener("input", () => {
      editor.setControl(spec.key, Number(input.value) as never);
      value.textContent = input.value;
    });
    const value = el(doc, "span", "value");
    row.append(input, value);
    controlsBox.append(row);
    sliders.set(spec.key, input);
  }

  for (const flag of ["p", "q"] as const) {
    const row = el(doc, "label", "row");
    row.append(el(doc, "span", "name", flag === "p" ? "Pose differs (p)" : "Light differs (q)"));
    const box = el(doc, "input");
    box.type = "checkbox";
    box.dataset.control = flag;
    box.addEventListener("change", () => {
      editor.setControl(flag, box.checked ? 1 : 0);
    });
    row.append(box);
    controlsBox.append(row);
  }

  const envRow = el(doc, "div", "env-row");
  envRow.append(el(doc, "span", "name", "Environment"));
  const envList = el(doc, "div", "env-list");
  envRow.append(envList);
  controlsBox.append(envRow);

  try {
    await editor.connect(sessionSpec);
  } catch {
    // banner already shows the failure; retry button stays live
    return { editor, root, sliders, afterImg: img };
  }

  for (const env of editor.envs) {
    const thumb = el(doc, "img", "env-thumb");
    thumb.src = api.envThumbUrl(env.id);
    thumb.title = env.id;
    thumb.addEventListener("click", () => {
      editor.setControl("envId", env.id);
      envList.querySelectorAll(".env-thumb").forEach((n) =>
        n.classList.toggle("selected", n === thumb));
    });
    envList.append(thumb);
  }

  for (const [key, input] of sliders) {
    const v = editor.controls[key];
    if (typeof v === "number") input.value = String(v);
  }

  return { editor, root, sliders, afterImg: img };
}

/** Browser entry point: mount into #app against the serving origin. */
export function start(): void {
  const doc = globalThis.document;
  const root = doc.getElementById("app");
  if (!root) throw new Error("#app container missing");
  const params = new URLSearchParams(doc.location.search);
  const spec: Record<string, unknown> = {};
  if (params.get("stack_dir")) spec.stack_dir = params.get("stack_dir");
  if (params.get("latent_path")) spec.latent_path = params.get("latent_path");
  if (params.get("identity")) {
    spec.identity = params.get("identity");
    spec.camera = params.get("camera") ?? "cam0";
  }
  const api = new ApiClient(doc.location.origin);
  void mountEditor(root, api, spec);
}
