// Typed client for the controller's HTTP API. The UI talks to nothing else.

export interface MetricsDoc {
  nodeId: string;
  timestampMs: number;
  cpuPercent: number;
  memPercent: number;
  perContainer: { containerId: string; cpuPercent: number; memPercent: number }[];
}

export interface NodeDoc {
  nodeId: string;
  ip: string;
  port: number;
  alive: boolean;
  registeredAtMs: number;
  lastSeenMs: number;
  metrics: MetricsDoc | null;
}

export interface ContainerDoc {
  containerId: string;
  nodeId: string;
  conType: "os" | "app";
  status: string;
  owner: string;
  ip: string | null;
  fingerprint: string | null;
}

export interface RequestDoc {
  requestId: string;
  conType: "os" | "app";
  nodeId: string;
  action: "launch" | "start" | "stop" | "terminate";
  containerId: string;
  appImage?: string;
}

export interface ResponseDoc {
  requestId: string;
  outcome: "ok" | "error";
  status?: string;
  ip?: string;
  keyHandle?: string;
  result?: string; // base64
  errorDetail?: string;
}

export interface ActiveUserDoc {
  username: string;
  role: string;
  sessions: { startedAtMs: number; lastActivityAtMs: number }[];
}

export class ApiError extends Error {
  constructor(public code: string, detail: string) {
    super(detail);
  }
}

const SESSION_HEADER = "X-EaaS-Session";

export class EaasApi {
  token: string | null = null;
  role: string | null = null;
  username: string | null = null;

  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = (...args) => globalThis.fetch(...args),
  ) {}

  private async call(method: string, path: string, body?: unknown): Promise<Response> {
    const headers: Record<string, string> = {};
    if (this.token) headers[SESSION_HEADER] = this.token;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    const response = await this.fetchFn(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) {
      let code = "Internal";
      let detail = `HTTP ${response.status}`;
      try {
        const doc = await response.json();
        code = doc.error ?? code;
        detail = doc.detail ?? detail;
      } catch {
        // keep the defaults
      }
      throw new ApiError(code, detail);
    }
    return response;
  }

  async login(username: string, password: string): Promise<string> {
    const doc = await (await this.call("POST", "/login", { username, password })).json();
    this.token = doc.token;
    this.role = doc.role;
    this.username = username;
    return doc.role;
  }

  async nodes(): Promise<NodeDoc[]> {
    return (await (await this.call("GET", "/nodes")).json()).nodes;
  }

  async containers(): Promise<ContainerDoc[]> {
    return (await (await this.call("GET", "/containers")).json()).containers;
  }

  async submit(request: RequestDoc): Promise<ResponseDoc> {
    return await (await this.call("POST", "/requests", { type: "request", ...request })).json();
  }

  async downloadKey(keyHandle: string): Promise<Uint8Array> {
    const response = await this.call("GET", `/keys/${keyHandle}`);
    return new Uint8Array(await response.arrayBuffer());
  }

  async metrics(nodeId: string): Promise<MetricsDoc> {
    return await (await this.call("GET", `/metrics?nodeId=${encodeURIComponent(nodeId)}`)).json();
  }

  async activeUsers(): Promise<ActiveUserDoc[]> {
    return (await (await this.call("GET", "/users/active")).json()).users;
  }
}

export function decodeResult(base64: string): string {
  try {
    return atob(base64);
  } catch {
    return "(binary result)";
  }
}

export function freshRequestId(): string {
  let out = "";
  for (let i = 0; i < 4; i++) {
    out += Math.floor(Math.random() * 0xffffffff).toString(16).padStart(8, "0");
  }
  return out;
}
